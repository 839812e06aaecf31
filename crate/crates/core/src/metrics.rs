//! Liveness error rates, ACE and DET curves.
//!
//! Scores are the probability of the fake class. A sample is declared fake
//! when `score ≥ threshold`. All rates are percentages.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::Label;
use crate::error::{contract_err, Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const SCORE_HEADER: &str = "path,label,material,score";
const DET_HEADER: &str = "threshold,ferrlive,ferrfake";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub path: String,
    pub label: Label,
    pub material: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(records: Vec<ScoreRecord>) -> Self {
        Self { records }
    }

    /// Unnamed records from parallel slices.
    pub fn from_scores(live: &[f64], fake: &[f64]) -> Self {
        let rec = |label, &score: &f64| ScoreRecord { path: String::new(), label, material: String::new(), score };
        let records =
            live.iter().map(|s| rec(Label::Live, s)).chain(fake.iter().map(|s| rec(Label::Fake, s))).collect();
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn scores(&self, label: Label) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().filter(move |r| r.label == label).map(|r| r.score)
    }

    /// Distinct materials among the fake records, sorted.
    pub fn fake_materials(&self) -> Vec<String> {
        let set: BTreeSet<&str> =
            self.records.iter().filter(|r| r.label == Label::Fake).map(|r| r.material.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    fn require_both_classes(&self) -> Result<()> {
        for label in Label::ALL {
            if self.scores(label).next().is_none() {
                return contract_err(format!("score set has no {label} samples"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{SCORE_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.path, r.label, r.material, r.score);
        }
        out
    }

    /// Parses `path,label,material,score` lines. The path may itself contain
    /// commas; the last three fields are split from the right.
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || (n == 0 && line == SCORE_HEADER) {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("score line {}: {what}: {line:?}", n + 1));
            let mut fields = line.rsplitn(4, ',');
            let (Some(score), Some(material), Some(label), Some(path)) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected path,label,material,score"));
            };
            let label = Label::parse(label.trim()).ok_or_else(|| bad("unknown label"))?;
            let score: f64 = score.trim().parse().map_err(|_| bad("bad score"))?;
            if !score.is_finite() {
                return Err(bad("score is not finite"));
            }
            records.push(ScoreRecord { path: path.to_string(), label, material: material.trim().to_string(), score });
        }
        Ok(Self { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// `(ferrlive, ferrfake)`: live scored at or above the threshold, and fake
/// scored below it.
pub fn error_rates(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    s.require_both_classes()?;
    let (mut live, mut live_err, mut fake, mut fake_err) = (0, 0, 0, 0);
    for r in &s.records {
        match r.label {
            Label::Live => {
                live += 1;
                live_err += usize::from(r.score >= threshold);
            }
            Label::Fake => {
                fake += 1;
                fake_err += usize::from(r.score < threshold);
            }
        }
    }
    Ok((percent(live_err, live), percent(fake_err, fake)))
}

/// Average classification error.
pub fn ace(ferrlive: f64, ferrfake: f64) -> f64 {
    (ferrlive + ferrfake) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub ferrlive: f64,
    pub ferrfake: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetCurve {
    /// Ordered by increasing threshold.
    pub points: Vec<DetPoint>,
}

/// Error rates at every distinct score plus one sentinel below the minimum
/// and one above the maximum.
pub fn det_curve(s: &ScoreSet) -> Result<DetCurve> {
    s.require_both_classes()?;
    let mut sorted: Vec<(f64, Label)> = s.records.iter().map(|r| (r.score, r.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_live = sorted.iter().filter(|r| r.1 == Label::Live).count();
    let n_fake = sorted.len() - n_live;
    let lo = sorted[0].0 - 1.0;
    let hi = sorted[sorted.len() - 1].0 + 1.0;

    // sweeping upward: samples strictly below the threshold are called live
    let mut points = vec![DetPoint { threshold: lo, ferrlive: 100.0, ferrfake: 0.0 }];
    let (mut live_below, mut fake_below) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(DetPoint {
            threshold: t,
            ferrlive: percent(n_live - live_below, n_live),
            ferrfake: percent(fake_below, n_fake),
        });
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Live => live_below += 1,
                Label::Fake => fake_below += 1,
            }
            i += 1;
        }
    }
    points.push(DetPoint { threshold: hi, ferrlive: 0.0, ferrfake: 100.0 });
    Ok(DetCurve { points })
}

/// Percentage of fake samples (restricted to `materials` when non-empty)
/// detected as fake.
pub fn detection_rate(s: &ScoreSet, materials: &[String], threshold: f64) -> Result<f64> {
    let selected: Vec<f64> = s
        .records
        .iter()
        .filter(|r| r.label == Label::Fake && (materials.is_empty() || materials.contains(&r.material)))
        .map(|r| r.score)
        .collect();
    if selected.is_empty() {
        return contract_err(format!("no fake samples match materials {materials:?}"));
    }
    Ok(percent(selected.iter().filter(|&&v| v >= threshold).count(), selected.len()))
}

impl DetCurve {
    /// Lowest ACE over the sweep, with its threshold.
    pub fn min_ace(&self) -> (f64, f64) {
        self.points
            .iter()
            .map(|p| (p.threshold, ace(p.ferrlive, p.ferrfake)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("curve has sentinels")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{DET_HEADER}\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:.2},{:.2}", p.threshold, p.ferrlive, p.ferrfake);
        }
        out
    }

    /// Two linear panels (0–100 % and 0–20 %) with Ferrfake on the x axis
    /// and Ferrlive on the y axis.
    pub fn to_svg(&self) -> String {
        const PANEL: f64 = 320.0;
        const MARGIN: f64 = 48.0;
        let width = 2.0 * (PANEL + 2.0 * MARGIN);
        let height = PANEL + 2.0 * MARGIN;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        for (panel, limit) in [100.0, 20.0].into_iter().enumerate() {
            let ox = panel as f64 * (PANEL + 2.0 * MARGIN) + MARGIN;
            let oy = MARGIN;
            let sx = |v: f64| ox + v / limit * PANEL;
            let sy = |v: f64| oy + PANEL - v / limit * PANEL;
            let _ = writeln!(svg, "<clipPath id=\"clip{panel}\"><rect x=\"{ox}\" y=\"{oy}\" width=\"{PANEL}\" height=\"{PANEL}\"/></clipPath>");
            let _ = writeln!(
                svg,
                "<rect x=\"{ox}\" y=\"{oy}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"black\"/>"
            );
            for step in 0..=5 {
                let v = limit * step as f64 / 5.0;
                let _ = writeln!(
                    svg,
                    "<line x1=\"{x}\" y1=\"{oy}\" x2=\"{x}\" y2=\"{b}\" stroke=\"#ddd\"/><text x=\"{x}\" y=\"{t}\" text-anchor=\"middle\">{v}</text>",
                    x = sx(v),
                    b = oy + PANEL,
                    t = oy + PANEL + 14.0
                );
                let _ = writeln!(
                    svg,
                    "<line x1=\"{ox}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#ddd\"/><text x=\"{l}\" y=\"{y}\" text-anchor=\"end\" dominant-baseline=\"middle\">{v}</text>",
                    y = sy(v),
                    r = ox + PANEL,
                    l = ox - 4.0
                );
            }
            let pts: Vec<String> =
                self.points.iter().map(|p| format!("{:.3},{:.3}", sx(p.ferrfake), sy(p.ferrlive))).collect();
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" clip-path=\"url(#clip{panel})\"/>",
                pts.join(" ")
            );
            let _ = writeln!(
                svg,
                "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\">Ferrfake (%)</text><text x=\"{lx}\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 {lx} {cy})\">Ferrlive (%)</text><text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">DET 0-{limit}%</text>",
                cx = ox + PANEL / 2.0,
                by = oy + PANEL + 32.0,
                lx = ox - 34.0,
                cy = oy + PANEL / 2.0,
                ty = oy - 12.0
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
