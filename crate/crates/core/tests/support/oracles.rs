//! Brute-force oracles for gram features, biometric metrics and checkpoint
//! round trips. Each check returns a one-line summary or a failure message.
//! Shared by the core property tests and the acceptance suite.

use gramnet::dataset::Label;
use gramnet::metrics::ScoreRecord;
use gramnet::{det_curve, detection_rate, error_rates, Error, GramNet32, Graph, NetConfig, ScoreSet, Tensor};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<String, String>;

/// Double loop over positions for one sample.
fn gram_by_loops(x: &Tensor<f64>, sample: usize, normalize: bool) -> Vec<f64> {
    let [_, c, h, w] = x.dims4().unwrap();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for z in 0..w {
                    acc += x.at(&[sample, i, y, z]) * x.at(&[sample, j, y, z]);
                }
            }
            g[i * c + j] = if normalize { acc / (h * w) as f64 } else { acc };
        }
    }
    g
}

/// `tensors` random inputs with `C ≤ 8`, `H, W ≤ 7`.
pub fn gram_oracle(tensors: usize, rng: &mut ChaCha8Rng) -> Check {
    let (mut worst_rel, mut min_eig) = (0.0f64, f64::INFINITY);
    for t in 0..tensors {
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=7), rng.gen_range(1..=7)];
        let n = shape.iter().product();
        let x = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let normalize = t % 2 == 1;
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let gv = g.gram_matrix(xv, normalize).map_err(|e| e.to_string())?;
        let out = g.value(gv);
        let c = shape[1];
        if out.shape() != [shape[0], 1, c, c] {
            return Err(format!("tensor {t}: shape {:?} for input {shape:?}", out.shape()));
        }
        for s in 0..shape[0] {
            let got = &out.data()[s * c * c..][..c * c];
            let want = gram_by_loops(&x, s, normalize);
            for (k, (&a, &o)) in got.iter().zip(&want).enumerate() {
                let rel = if o == 0.0 { a.abs() } else { (a - o).abs() / o.abs() };
                worst_rel = worst_rel.max(rel);
                if rel > 1e-5 {
                    return Err(format!("tensor {t} sample {s} entry {k}: {a} vs oracle {o}"));
                }
                let (i, j) = (k / c, k % c);
                if a.to_bits() != got[j * c + i].to_bits() {
                    return Err(format!("tensor {t} sample {s}: entry ({i},{j}) differs from ({j},{i})"));
                }
            }
            let eig = DMatrix::from_row_slice(c, c, got).symmetric_eigenvalues();
            let lowest = eig.iter().copied().fold(f64::INFINITY, f64::min);
            min_eig = min_eig.min(lowest);
            if lowest < -1e-5 {
                return Err(format!("tensor {t} sample {s}: eigenvalue {lowest}"));
            }
        }
    }
    Ok(format!("{tensors} tensors, max rel error {worst_rel:.2e}, min eigenvalue {min_eig:.2e}, symmetric"))
}

fn rates_by_counting(records: &[ScoreRecord], t: f64) -> (f64, f64) {
    let live: Vec<f64> = records.iter().filter(|r| r.label == Label::Live).map(|r| r.score).collect();
    let fake: Vec<f64> = records.iter().filter(|r| r.label == Label::Fake).map(|r| r.score).collect();
    let live_err = live.iter().filter(|&&s| s >= t).count();
    let fake_err = fake.iter().filter(|&&s| s < t).count();
    (100.0 * live_err as f64 / live.len() as f64, 100.0 * fake_err as f64 / fake.len() as f64)
}

fn random_scores(rng: &mut ChaCha8Rng) -> ScoreSet {
    const MATERIALS: [&str; 3] = ["gelatin", "latex", "silicone"];
    let coarse = rng.gen_bool(0.5);
    let mut records = Vec::new();
    for label in Label::ALL {
        for i in 0..rng.gen_range(1..=40) {
            let raw: f64 = rng.gen();
            let score = if coarse { (raw * 10.0).round() / 10.0 } else { raw };
            let material = match label {
                Label::Live => "live".to_string(),
                Label::Fake => MATERIALS.choose(rng).unwrap().to_string(),
            };
            records.push(ScoreRecord { path: format!("{label}{i}.png"), label, material, score });
        }
    }
    records.shuffle(rng);
    ScoreSet::new(records)
}

/// Error rates and DET points against a threshold-by-threshold count,
/// staircase monotonicity, and the detection-rate identity on material
/// subsets.
pub fn metrics_oracle(sets: usize, rng: &mut ChaCha8Rng) -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut points = 0;
    for k in 0..sets {
        let s = random_scores(rng);
        let mut scores: Vec<f64> = s.records.iter().map(|r| r.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();

        let mut thresholds = scores.clone();
        thresholds.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        thresholds.extend([scores[0] - 1.0, scores[scores.len() - 1] + 1.0, 0.5, -0.0]);
        for &t in &thresholds {
            let got = error_rates(&s, t).map_err(|e| e.to_string())?;
            let want = rates_by_counting(&s.records, t);
            if !close(got.0, want.0) || !close(got.1, want.1) {
                return Err(format!("set {k}: error_rates at {t} = {got:?}, counting gives {want:?}"));
            }
        }

        let curve = det_curve(&s).map_err(|e| e.to_string())?;
        let curve_thresholds: Vec<f64> = curve.points.iter().map(|p| p.threshold).collect();
        let mut expected = vec![scores[0] - 1.0];
        expected.extend(&scores);
        expected.push(scores[scores.len() - 1] + 1.0);
        if curve_thresholds != expected {
            return Err(format!("set {k}: DET thresholds {curve_thresholds:?}, expected {expected:?}"));
        }
        for (i, p) in curve.points.iter().enumerate() {
            let want = rates_by_counting(&s.records, p.threshold);
            if !close(p.ferrlive, want.0) || !close(p.ferrfake, want.1) {
                return Err(format!("set {k}: DET point {p:?}, counting gives {want:?}"));
            }
            if i > 0 {
                let q = curve.points[i - 1];
                if p.ferrlive > q.ferrlive || p.ferrfake < q.ferrfake {
                    return Err(format!("set {k}: staircase not monotone between {q:?} and {p:?}"));
                }
            }
        }
        points += curve.points.len();

        for subset in [vec![], vec!["gelatin".to_string()], vec!["latex".to_string(), "silicone".to_string()]] {
            let kept: Vec<ScoreRecord> = s
                .records
                .iter()
                .filter(|r| r.label == Label::Live || subset.is_empty() || subset.contains(&r.material))
                .cloned()
                .collect();
            if !kept.iter().any(|r| r.label == Label::Fake) {
                continue;
            }
            let filtered = ScoreSet::new(kept);
            for t in [0.5, scores[scores.len() / 2]] {
                let rate = detection_rate(&s, &subset, t).map_err(|e| e.to_string())?;
                let (_, ferrfake) = error_rates(&filtered, t).map_err(|e| e.to_string())?;
                if !close(rate, 100.0 - ferrfake) {
                    return Err(format!("set {k} materials {subset:?} at {t}: rate {rate} vs ferrfake {ferrfake}"));
                }
            }
        }
    }
    Ok(format!("{sets} score sets, {points} DET points match counting, staircases monotone"))
}

/// Untrained weights plus non-trivial running statistics.
pub fn perturbed_net(seed: u64, rng: &mut ChaCha8Rng) -> GramNet32 {
    let mut net = GramNet32::build(seed, NetConfig::default()).unwrap();
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let name = net.store.entry(id).name.clone();
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 2.0)
        } else if name.ends_with("running_mean") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        for v in net.store.get_mut(id).data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    net
}

fn expect_format_error(result: gramnet::Result<GramNet32>, what: &str) -> std::result::Result<(), String> {
    match result {
        Err(Error::CheckpointFormat(_)) => Ok(()),
        Err(e) => Err(format!("{what}: expected checkpoint-format error, got {e}")),
        Ok(_) => Err(format!("{what}: loaded successfully")),
    }
}

/// Save, load, and compare logits bit for bit; then corrupt the header,
/// truncate, and forge the architecture hash.
pub fn serialization_oracle(inputs: usize, rng: &mut ChaCha8Rng) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("net.grmn");
    let net = perturbed_net(rng.gen(), rng);
    net.save(&path).map_err(|e| e.to_string())?;
    let loaded = GramNet32::load(&path).map_err(|e| e.to_string())?;
    if loaded != net {
        return Err("loaded network differs from the saved one".into());
    }
    for i in 0..inputs {
        let (h, w) = (rng.gen_range(29..=48), rng.gen_range(29..=48));
        let n = rng.gen_range(1..=2);
        let x = Tensor::from_vec(&[n, 1, h, w], (0..n * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let a = net.infer(&x).map_err(|e| e.to_string())?;
        let b = loaded.infer(&x).map_err(|e| e.to_string())?;
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            return Err(format!("input {i} ({n}×1×{h}×{w}): logits {:?} vs {:?}", a.data(), b.data()));
        }
    }

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let bad = dir.path().join("bad.grmn");
    let write = |b: &[u8]| std::fs::write(&bad, b).map_err(|e| e.to_string());

    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    write(&magic)?;
    expect_format_error(GramNet32::load(&bad), "bad magic")?;

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    write(&version)?;
    expect_format_error(GramNet32::load(&bad), "bad version")?;

    let mut cuts: Vec<usize> = (0..24).collect();
    cuts.extend((0..40).map(|_| rng.gen_range(24..bytes.len())));
    cuts.push(bytes.len() - 1);
    for &cut in &cuts {
        write(&bytes[..cut])?;
        expect_format_error(GramNet32::load(&bad), &format!("truncated to {cut} bytes"))?;
    }

    let mut forged = bytes.clone();
    forged[8] ^= 0x01;
    write(&forged)?;
    match GramNet32::load(&bad) {
        Err(Error::IncompatibleCheckpoint(_)) => {}
        Err(e) => return Err(format!("forged hash: expected incompatible-checkpoint error, got {e}")),
        Ok(_) => return Err("forged hash: loaded successfully".into()),
    }
    Ok(format!(
        "{inputs} inputs bit-identical; bad magic, bad version and {} truncations rejected; forged hash incompatible",
        cuts.len()
    ))
}
