//! Privacy and utility metrics: equal error rate over verification trials,
//! unweighted average recall over emotion predictions, and ranked tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub score: f64,
    pub label: TrialLabel,
    /// Optional speaker-gender tag used for per-gender breakdowns.
    pub gender: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub trials: Vec<Trial>,
}

impl TrialScores {
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let mk = |(i, &s): (usize, &f64), label, tag: &str| Trial {
            trial_id: format!("{tag}{i}"),
            score: s,
            label,
            gender: None,
        };
        let mut trials: Vec<Trial> = targets
            .iter()
            .enumerate()
            .map(|p| mk(p, TrialLabel::Target, "t"))
            .collect();
        trials.extend(
            nontargets
                .iter()
                .enumerate()
                .map(|p| mk(p, TrialLabel::Nontarget, "n")),
        );
        Self { trials }
    }

    fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for tr in &self.trials {
            match tr.label {
                TrialLabel::Target => t.push(tr.score),
                TrialLabel::Nontarget => n.push(tr.score),
            }
        }
        (t, n)
    }

    pub fn genders(&self) -> BTreeSet<String> {
        self.trials
            .iter()
            .filter_map(|t| t.gender.clone())
            .collect()
    }

    pub fn subset(&self, gender: &str) -> Self {
        Self {
            trials: self
                .trials
                .iter()
                .filter(|t| t.gender.as_deref() == Some(gender))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer_percent: f64,
    pub threshold: f64,
}

/// Equal error rate by threshold sweep.
///
/// Thresholds are the distinct scores in ascending order followed by `+inf`.
/// `FAR(θ)` is the fraction of nontarget scores `>= θ`, `FRR(θ)` the fraction
/// of target scores `< θ`. The first threshold where `FAR <= FRR` brackets the
/// crossing, which is located by linear interpolation from the previous one.
pub fn compute_eer(scores: &TrialScores) -> Result<EerResult> {
    let (t, n) = scores.split();
    eer_from_scores(&t, &n)
}

pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::DegenerateTrials);
    }
    if let Some(bad) = targets.iter().chain(nontargets).find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite trial score {bad}")));
    }
    let mut t = targets.to_vec();
    let mut n = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (t.len() as f64, n.len() as f64);
    let rates = |theta: f64| {
        let below_t = t.partition_point(|&s| s < theta);
        let below_n = n.partition_point(|&s| s < theta);
        ((n.len() - below_n) as f64 / nn, below_t as f64 / nt)
    };
    // At the lowest score FAR = 1 and FRR = 0.
    let (mut prev_far, mut prev_frr) = rates(thresholds[0]);
    let mut prev_theta = thresholds[0];
    for &theta in &thresholds[1..] {
        let (far, frr) = rates(theta);
        if far <= frr {
            let d0 = prev_far - prev_frr;
            let d1 = far - frr;
            let w = d0 / (d0 - d1);
            let eer = prev_far + w * (far - prev_far);
            let threshold = if theta.is_finite() {
                prev_theta + w * (theta - prev_theta)
            } else {
                prev_theta
            };
            return Ok(EerResult {
                eer_percent: 100.0 * eer,
                threshold,
            });
        }
        prev_far = far;
        prev_frr = frr;
        prev_theta = theta;
    }
    unreachable!("FAR reaches 0 and FRR reaches 1 at +inf")
}

/// Overall EER plus one EER per gender tag and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub overall: EerResult,
    pub per_gender: BTreeMap<String, EerResult>,
    pub gender_average: Option<f64>,
}

pub fn eer_report(scores: &TrialScores) -> Result<EerReport> {
    let overall = compute_eer(scores)?;
    let mut per_gender = BTreeMap::new();
    for g in scores.genders() {
        per_gender.insert(g.clone(), compute_eer(&scores.subset(&g))?);
    }
    let gender_average = (!per_gender.is_empty())
        .then(|| per_gender.values().map(|r| r.eer_percent).sum::<f64>() / per_gender.len() as f64);
    Ok(EerReport {
        overall,
        per_gender,
        gender_average,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrediction {
    pub utterance_id: String,
    pub predicted: String,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionPredictions {
    /// Class inventory; every class must occur at least once as a true label.
    pub classes: Vec<String>,
    pub items: Vec<EmotionPrediction>,
}

impl EmotionPredictions {
    /// Class set taken from the true labels.
    pub fn new(items: Vec<EmotionPrediction>) -> Self {
        let classes: BTreeSet<String> = items.iter().map(|p| p.truth.clone()).collect();
        Self {
            classes: classes.into_iter().collect(),
            items,
        }
    }

    /// `confusion[true][predicted]` over `classes`; predictions outside the
    /// inventory land in no column and count as errors.
    pub fn confusion(&self) -> Result<Vec<Vec<u64>>> {
        let index: BTreeMap<&str, usize> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let k = self.classes.len();
        let mut m = vec![vec![0u64; k]; k];
        let mut other = vec![0u64; k];
        for p in &self.items {
            let Some(&t) = index.get(p.truth.as_str()) else {
                return Err(Error::Invalid(format!(
                    "true class {} not in class set",
                    p.truth
                )));
            };
            match index.get(p.predicted.as_str()) {
                Some(&q) => m[t][q] += 1,
                None => other[t] += 1,
            }
        }
        for (c, row) in m.iter().enumerate() {
            if row.iter().sum::<u64>() + other[c] == 0 {
                return Err(Error::ClassAbsent(self.classes[c].clone()));
            }
        }
        if other.iter().any(|&o| o > 0) {
            // Keep totals: fold stray predictions into an extra column.
            for (row, o) in m.iter_mut().zip(&other) {
                row.push(*o);
            }
        }
        Ok(m)
    }
}

/// `100 * mean_c(correct_c / total_c)`.
pub fn compute_uar(preds: &EmotionPredictions) -> Result<f64> {
    if preds.classes.is_empty() {
        return Err(Error::Invalid("empty class set".into()));
    }
    uar_from_confusion(&preds.confusion()?)
}

/// UAR of a square (or square plus one overflow column) confusion matrix
/// indexed `[true][predicted]`.
pub fn uar_from_confusion(m: &[Vec<u64>]) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Invalid("empty confusion matrix".into()));
    }
    let mut sum = 0.0;
    for (c, row) in m.iter().enumerate() {
        if row.len() < m.len() {
            return Err(Error::Invalid("confusion matrix is not square".into()));
        }
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::ClassAbsent(format!("class {c}")));
        }
        sum += row[c] as f64 / total as f64;
    }
    Ok(100.0 * sum / m.len() as f64)
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Lines `trial_id score label [gender]`, whitespace separated. Blank lines
/// and `#` comments are skipped.
pub fn load_trials(path: &Path) -> Result<TrialScores> {
    let mut trials = Vec::new();
    for (no, line) in lines(path)? {
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&f.len()) {
            return Err(parse_err(
                path,
                no,
                format!("expected 'trial_id score label [gender]', got {line:?}"),
            ));
        }
        let score: f64 = f[1]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_err(path, no, format!("bad score {:?} in {line:?}", f[1])))?;
        let label = match f[2] {
            "target" => TrialLabel::Target,
            "nontarget" => TrialLabel::Nontarget,
            other => {
                return Err(parse_err(
                    path,
                    no,
                    format!("bad label {other:?} in {line:?}"),
                ))
            }
        };
        trials.push(Trial {
            trial_id: f[0].to_string(),
            score,
            label,
            gender: f.get(3).map(|g| g.to_string()),
        });
    }
    Ok(TrialScores { trials })
}

pub fn write_trials(path: &Path, scores: &TrialScores) -> Result<()> {
    let mut out = String::new();
    for t in &scores.trials {
        let _ = write!(out, "{} {} {}", t.trial_id, t.score, t.label.as_str());
        if let Some(g) = &t.gender {
            let _ = write!(out, " {g}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Lines `utterance_id predicted true`.
pub fn load_emotion(path: &Path) -> Result<EmotionPredictions> {
    let mut items = Vec::new();
    for (no, line) in lines(path)? {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(
                path,
                no,
                format!("expected 'utterance_id predicted true', got {line:?}"),
            ));
        }
        items.push(EmotionPrediction {
            utterance_id: f[0].to_string(),
            predicted: f[1].to_string(),
            truth: f[2].to_string(),
        });
    }
    Ok(EmotionPredictions::new(items))
}

pub fn write_emotion(path: &Path, preds: &EmotionPredictions) -> Result<()> {
    let mut out = String::new();
    for p in &preds.items {
        let _ = writeln!(out, "{} {} {}", p.utterance_id, p.predicted, p.truth);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricColumn {
    pub name: String,
    pub higher_is_better: bool,
}

impl MetricColumn {
    pub fn new(name: &str, higher_is_better: bool) -> Self {
        Self {
            name: name.into(),
            higher_is_better,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: String,
    /// Missing metrics render as `-` and take no rank.
    pub values: BTreeMap<String, Option<f64>>,
}

impl SystemResult {
    pub fn new(system: &str, values: &[(&str, Option<f64>)]) -> Self {
        Self {
            system: system.into(),
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied().flatten()
    }
}

/// Competition ranks (1, 2, 2, 4, ...) per metric; `None` where the value is missing.
pub fn rank_column(values: &[Option<f64>], higher_is_better: bool) -> Vec<Option<usize>> {
    values
        .iter()
        .map(|v| {
            v.map(|x| {
                1 + values
                    .iter()
                    .flatten()
                    .filter(|&&y| if higher_is_better { y > x } else { y < x })
                    .count()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
}

/// Aligned text table with `value (rank)` cells, rank 1 marked `*`, plus a
/// CSV rendering with separate value and rank columns.
pub fn render_results_table(
    systems: &[SystemResult],
    metrics: &[MetricColumn],
) -> Result<RenderedTable> {
    if systems.is_empty() {
        return Err(Error::Invalid("no systems to tabulate".into()));
    }
    let ranks: Vec<Vec<Option<usize>>> = metrics
        .iter()
        .map(|m| {
            let vals: Vec<_> = systems.iter().map(|s| s.get(&m.name)).collect();
            rank_column(&vals, m.higher_is_better)
        })
        .collect();

    let mut header = vec!["system".to_string()];
    header.extend(metrics.iter().map(|m| m.name.clone()));
    let mut rows = vec![header];
    for (i, s) in systems.iter().enumerate() {
        let mut row = vec![s.system.clone()];
        for (j, m) in metrics.iter().enumerate() {
            row.push(match (s.get(&m.name), ranks[j][i]) {
                (Some(v), Some(r)) => format!("{v:.2} ({r}){}", if r == 1 { "*" } else { "" }),
                _ => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
        if ri == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            text.push_str(&"-".repeat(total));
            text.push('\n');
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["system".to_string()];
    for m in metrics {
        head.push(m.name.clone());
        head.push(format!("{}_rank", m.name));
    }
    w.write_record(&head)?;
    for (i, s) in systems.iter().enumerate() {
        let mut rec = vec![s.system.clone()];
        for (j, m) in metrics.iter().enumerate() {
            rec.push(s.get(&m.name).map(|v| v.to_string()).unwrap_or_default());
            rec.push(ranks[j][i].map(|r| r.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(RenderedTable { text, csv })
}
