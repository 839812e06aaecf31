//! Finite-difference cases for every primitive and the composed modules.
//! Shared by the core gradient tests and the acceptance suite.

use gramnet::gradcheck::{check_gradients, check_graph_fn, GradReport, DEFAULT_FLOOR};
use gramnet::nn::{BnStats, Mode};
use gramnet::{FireModule, FireSpec, GramModule, Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
/// Instances are redrawn while any batch norm normalizes a channel with a
/// smaller spread: its output then moves too sharply for a step of `EPS`.
const MIN_BN_STD: f64 = 0.1;

pub struct CaseOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub worst: GradReport,
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=4);
    (0..rank).map(|_| rng.gen_range(1..=5)).collect()
}

/// `Σ w ⊙ y` with fixed random weights so no gradient is trivially uniform.
fn weighted(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn run<F>(name: &'static str, instances: usize, rng: &mut ChaCha8Rng, mut one: F) -> CaseOutcome
where
    F: FnMut(&mut ChaCha8Rng) -> GradReport,
{
    let mut worst: Option<GradReport> = None;
    for _ in 0..instances {
        let r = one(rng);
        if worst.is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    CaseOutcome { name, instances, worst: worst.expect("at least one instance") }
}

fn check<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>(inputs: &[Tensor<f64>], f: F) -> GradReport {
    check_graph_fn(inputs, EPS, DEFAULT_FLOOR, f).unwrap()
}

/// Trainable parameters of a module as checkable inputs. Returns `None`
/// when some probe lands on a different linear piece of a leaky ReLU than
/// the unperturbed point, since the difference quotient is then meaningless.
fn module_check<F>(store: &ParamStore<f64>, x: Tensor<f64>, forward: F) -> Option<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let mut base: Option<Vec<bool>> = None;
    let mut crossed = false;
    let report = check_gradients(&inputs, EPS, DEFAULT_FLOOR, |xs, want| {
        let mut s = store.clone();
        for (&id, t) in ids.iter().zip(&xs[1..]) {
            *s.get_mut(id) = t.clone();
        }
        let mut g = Graph::new();
        let xv = g.leaf(xs[0].clone());
        let loss = forward(&mut g, &s, xv)?;
        let value = g.value(loss).data()[0];
        let pattern = g.kink_pattern();
        match &base {
            None => base = Some(pattern),
            Some(b) => crossed |= *b != pattern,
        }
        if !want {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let mut grads = vec![g.grad(xv).cloned().unwrap()];
        let by_param: Vec<(ParamId, Tensor<f64>)> = g.param_grads().map(|(id, t)| (id, t.clone())).collect();
        for &id in &ids {
            let found = by_param.iter().find(|(p, _)| *p == id).map(|(_, t)| t.clone());
            grads.push(found.unwrap_or_else(|| store.get(id).map(|_| 0.0)));
        }
        Ok((value, grads))
    })
    .unwrap();
    (!crossed).then_some(report)
}

fn well_conditioned<F>(store: &ParamStore<f64>, x: &Tensor<f64>, forward: F) -> bool
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>,
{
    let mut probe = Graph::new();
    let xv = probe.leaf(x.clone());
    forward(&mut probe, store, xv).unwrap();
    probe.min_batch_std().is_none_or(|s| s >= MIN_BN_STD)
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let (lo, hi) = if name.ends_with(".scale") {
            (0.5, 1.5)
        } else if name.ends_with("running_var") {
            (0.5, 2.0)
        } else {
            (-1.0, 1.0)
        };
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = tensor(rng, &shape, lo, hi);
    }
}

pub fn all_cases(instances: usize, rng: &mut ChaCha8Rng) -> Vec<CaseOutcome> {
    let mut out = Vec::new();

    out.push(run("add", instances, rng, |rng| {
        let s = shape(rng);
        let (a, b, w) = (tensor(rng, &s, -2.0, 2.0), tensor(rng, &s, -2.0, 2.0), tensor(rng, &s, -1.0, 1.0));
        check(&[a, b], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, &w)
        })
    }));

    out.push(run("mul", instances, rng, |rng| {
        let s = shape(rng);
        let (a, b, w) = (tensor(rng, &s, -2.0, 2.0), tensor(rng, &s, -2.0, 2.0), tensor(rng, &s, -1.0, 1.0));
        check(&[a, b], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, &w)
        })
    }));

    out.push(run("sum", instances, rng, |rng| {
        let s = shape(rng);
        let a = tensor(rng, &s, -2.0, 2.0);
        check(&[a], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
    }));

    out.push(run("matmul", instances, rng, |rng| {
        let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (a, b, w) =
            (tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[k, n], -1.0, 1.0), tensor(rng, &[m, n], -1.0, 1.0));
        check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, &w)
        })
    }));

    out.push(run("conv2d", instances, rng, |rng| {
        let k = *[1usize, 3].choose(rng).unwrap();
        let stride = rng.gen_range(1..=2);
        let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
        let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, wd) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let x = tensor(rng, &[n, c, h, wd], -1.0, 1.0);
        let wt = tensor(rng, &[o, c, k, k], -1.0, 1.0);
        let b = tensor(rng, &[o], -1.0, 1.0);
        let lw = tensor(rng, &[n, o, ho, wo], -1.0, 1.0);
        check(&[x, wt, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            weighted(g, y, &lw)
        })
    }));

    out.push(run("maxpool2d", instances, rng, |rng| {
        let (n, c, h, wd) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=5), rng.gen_range(3..=5));
        // distinct values spaced far beyond the finite-difference step
        let len = n * c * h * wd;
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.05).collect();
        vals.shuffle(rng);
        let x = Tensor::from_vec(&[n, c, h, wd], vals).unwrap();
        let lw = tensor(rng, &[n, c, (h - 3) / 2 + 1, (wd - 3) / 2 + 1], -1.0, 1.0);
        check(&[x], |g, v| {
            let y = g.maxpool2d(v[0], 3, 2)?;
            weighted(g, y, &lw)
        })
    }));

    out.push(run("global_avg_pool", instances, rng, |rng| {
        let (n, c, h, wd) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let x = tensor(rng, &[n, c, h, wd], -1.0, 1.0);
        let lw = tensor(rng, &[n, c], -1.0, 1.0);
        check(&[x], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted(g, y, &lw)
        })
    }));

    out.push(run("batch_norm (batch statistics)", instances, rng, |rng| {
        let c = rng.gen_range(1..=3);
        let s: Vec<usize> = if rng.gen_bool(0.5) {
            vec![rng.gen_range(2..=5), c]
        } else {
            vec![rng.gen_range(1..=2), c, rng.gen_range(1..=4), rng.gen_range(2..=4)]
        };
        let x = loop {
            let x = tensor(rng, &s, -2.0, 2.0);
            let (scale, shift) = (Tensor::full(&[c], 1.0).unwrap(), Tensor::zeros(&[c]).unwrap());
            let mut probe = Graph::new();
            let (xv, sv, tv) = (probe.leaf(x.clone()), probe.leaf(scale), probe.leaf(shift));
            probe.batch_norm(xv, sv, tv, BnStats::Batch, 1e-5).unwrap();
            if probe.min_batch_std().unwrap() >= MIN_BN_STD {
                break x;
            }
        };
        let (scale, shift) = (tensor(rng, &[c], 0.5, 1.5), tensor(rng, &[c], -1.0, 1.0));
        let lw = tensor(rng, &s, -1.0, 1.0);
        check(&[x, scale, shift], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-5)?;
            weighted(g, y, &lw)
        })
    }));

    out.push(run("batch_norm (running statistics)", instances, rng, |rng| {
        let c = rng.gen_range(1..=3);
        let s = [rng.gen_range(1..=2), c, rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let x = tensor(rng, &s, -2.0, 2.0);
        let (scale, shift) = (tensor(rng, &[c], 0.5, 1.5), tensor(rng, &[c], -1.0, 1.0));
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let lw = tensor(rng, &s, -1.0, 1.0);
        check(&[x, scale, shift], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BnStats::Running { mean: &mean, var: &var }, 1e-5)?;
            weighted(g, y, &lw)
        })
    }));

    out.push(run("leaky_relu", instances, rng, |rng| {
        let s = shape(rng);
        let n: usize = s.iter().product();
        let vals = (0..n).map(|_| rng.gen_range(0.05..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let x = Tensor::from_vec(&s, vals).unwrap();
        let lw = tensor(rng, &s, -1.0, 1.0);
        check(&[x], |g, v| {
            let y = g.leaky_relu(v[0], 0.3)?;
            weighted(g, y, &lw)
        })
    }));

    out.push(run("tanh", instances, rng, |rng| {
        let s = shape(rng);
        let (x, lw) = (tensor(rng, &s, -2.0, 2.0), tensor(rng, &s, -1.0, 1.0));
        check(&[x], |g, v| {
            let y = g.tanh(v[0]);
            weighted(g, y, &lw)
        })
    }));

    out.push(run("concat_channels", instances, rng, |rng| {
        let (n, h, wd) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let parts = rng.gen_range(2..=3);
        let chans: Vec<usize> = (0..parts).map(|_| rng.gen_range(1..=3)).collect();
        let xs: Vec<Tensor<f64>> = chans.iter().map(|&c| tensor(rng, &[n, c, h, wd], -1.0, 1.0)).collect();
        let lw = tensor(rng, &[n, chans.iter().sum(), h, wd], -1.0, 1.0);
        check(&xs, |g, v| {
            let y = g.concat_channels(v)?;
            weighted(g, y, &lw)
        })
    }));

    for normalize in [false, true] {
        let name = if normalize { "gram_matrix (normalized)" } else { "gram_matrix" };
        out.push(run(name, instances, rng, |rng| {
            let (n, c, h, wd) =
                (rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
            let x = tensor(rng, &[n, c, h, wd], -1.0, 1.0);
            let lw = tensor(rng, &[n, 1, c, c], -1.0, 1.0);
            check(&[x], |g, v| {
                let y = g.gram_matrix(v[0], normalize)?;
                weighted(g, y, &lw)
            })
        }));
    }

    out.push(run("softmax_cross_entropy", instances, rng, |rng| {
        let (n, k) = (rng.gen_range(1..=5), rng.gen_range(2..=4));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let x = tensor(rng, &[n, k], -3.0, 3.0);
        check(&[x], |g, v| g.softmax_cross_entropy(v[0], &labels))
    }));

    out.push(run("gram module", instances, rng, |rng| loop {
        let (in_ch, k) = (rng.gen_range(1..=3), rng.gen_range(2..=4));
        let normalize = rng.gen_bool(0.5);
        let mut store = ParamStore::new();
        let m = GramModule::new(&mut store, "g", in_ch, k, normalize, 0.9, 1e-5, rng).unwrap();
        randomize(&mut store, rng);
        let s = [rng.gen_range(1..=2), in_ch, rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let x = tensor(rng, &s, -1.0, 1.0);
        if !well_conditioned(&store, &x, |g, st, xv| m.forward(g, st, xv, Mode::Train)) {
            continue;
        }
        let lw = tensor(rng, &[s[0], 1, k, k], -1.0, 1.0);
        break module_check(&store, x, |g, st, xv| {
            let y = m.forward(g, st, xv, Mode::Train)?;
            weighted(g, y, &lw)
        })
        .expect("gram module has no kinks");
    }));

    out.push(run("fire module", instances, rng, |rng| loop {
        let in_ch = rng.gen_range(1..=3);
        let mut store = ParamStore::new();
        let m = FireModule::new(&mut store, "f", FireSpec::new(in_ch, 2, 16).unwrap(), 0.9, 1e-5, rng).unwrap();
        randomize(&mut store, rng);
        let s = [rng.gen_range(1..=2), in_ch, rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let x = tensor(rng, &s, -1.0, 1.0);
        if !well_conditioned(&store, &x, |g, st, xv| m.forward(g, st, xv, Mode::Train)) {
            continue;
        }
        let lw = tensor(rng, &[s[0], 16, s[2], s[3]], -1.0, 1.0);
        let report = module_check(&store, x, |g, st, xv| {
            let y = m.forward(g, st, xv, Mode::Train)?;
            weighted(g, y, &lw)
        });
        if let Some(r) = report {
            break r;
        }
    }));

    out
}
