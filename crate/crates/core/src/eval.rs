//! Precision/recall/F1 on the hate class, McNemar's paired test, and reports.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::textio::Label;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions for {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("baseline F1 must be positive")]
    ZeroBase,
    #[error("McNemar's test is undefined without discordant pairs")]
    Undefined,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no prediction for post {0}")]
    MissingPrediction(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// `2PR/(P+R)`, or 0 when `P + R = 0`.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn prf1(predictions: &[Label], gold: &[Label]) -> Result<Prf1, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), gold.len()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p == 1, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let precision = if c.tp + c.fp > 0 {
        c.tp as f64 / (c.tp + c.fp) as f64
    } else {
        log::warn!("no positive predictions; precision set to 0");
        0.0
    };
    let recall = if c.tp + c.fn_ > 0 {
        c.tp as f64 / (c.tp + c.fn_) as f64
    } else {
        log::warn!("no positive gold labels; recall set to 0");
        0.0
    };
    Ok(Prf1 { precision, recall, f1: f1_from_pr(precision, recall), confusion: c })
}

/// `100·(new − base)/base`.
pub fn relative_improvement(f1_new: f64, f1_base: f64) -> Result<f64, EvalError> {
    if f1_base <= 0.0 {
        return Err(EvalError::ZeroBase);
    }
    Ok(100.0 * (f1_new - f1_base) / f1_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// First model right, second wrong.
    pub b: usize,
    /// First model wrong, second right.
    pub c: usize,
    pub chi2: f64,
    pub p_value: f64,
}

/// Continuity-corrected statistic `(|b − c| − 1)² / (b + c)` with its χ²(1) tail probability.
pub fn mcnemar_from_counts(b: usize, c: usize) -> Result<McNemar, EvalError> {
    if b + c == 0 {
        return Err(EvalError::Undefined);
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let chi2 = diff.powi(2) / (b + c) as f64;
    Ok(McNemar { b, c, chi2, p_value: chi2_sf_1df(chi2) })
}

pub fn mcnemar(preds_a: &[Label], preds_b: &[Label], gold: &[Label]) -> Result<McNemar, EvalError> {
    if preds_a.len() != gold.len() || preds_b.len() != gold.len() {
        return Err(EvalError::LengthMismatch(preds_a.len().max(preds_b.len()), gold.len()));
    }
    let (mut b, mut c) = (0, 0);
    for ((&pa, &pb), &g) in preds_a.iter().zip(preds_b).zip(gold) {
        match (pa == g, pb == g) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    mcnemar_from_counts(b, c)
}

/// Relative size at which series and continued-fraction evaluation stop.
const GAMMA_EPS: f64 = 1e-12;
const GAMMA_MAX_ITER: usize = 10_000;

/// Upper tail of the χ² distribution with one degree of freedom.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_q(0.5, x / 2.0)
    }
}

/// Lanczos approximation (g = 7, nine terms) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        1.0 - sum * log_prefactor.exp()
    } else {
        // Modified Lentz evaluation of the continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        h * log_prefactor.exp()
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub pred: Label,
    pub scores: [f64; 2],
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| EvalError::Malformed { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    read_predictions(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<(), EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        writeln!(w, "{}", serde_json::to_string(p).map_err(std::io::Error::other)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Predicted labels for `ids`, in that order.
pub fn align(preds: &[PredictionRecord], ids: &[&str]) -> Result<Vec<Label>, EvalError> {
    let by_id: std::collections::HashMap<&str, Label> = preds.iter().map(|p| (p.id.as_str(), p.pred)).collect();
    ids.iter().map(|id| by_id.get(id).copied().ok_or_else(|| EvalError::MissingPrediction(id.to_string()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    #[serde(flatten)]
    pub scores: Prf1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    /// `None` when the test is undefined.
    pub mcnemar: Option<McNemar>,
    pub relative_f1_improvement: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub models: Vec<ModelMetrics>,
    pub comparisons: Vec<Comparison>,
}

impl MetricsReport {
    /// Scores every model against `gold` and compares each later model with the first.
    pub fn build(gold: &[Label], models: &[(String, Vec<Label>)]) -> Result<Self, EvalError> {
        let mut report = MetricsReport::default();
        for (name, preds) in models {
            report.models.push(ModelMetrics { name: name.clone(), scores: prf1(preds, gold)? });
        }
        if let Some((base_name, base)) = models.first() {
            let base_f1 = report.models[0].scores.f1;
            for (i, (name, preds)) in models.iter().enumerate().skip(1) {
                let test = match mcnemar(base, preds, gold) {
                    Ok(m) => Some(m),
                    Err(EvalError::Undefined) => None,
                    Err(e) => return Err(e),
                };
                report.comparisons.push(Comparison {
                    first: base_name.clone(),
                    second: name.clone(),
                    mcnemar: test,
                    relative_f1_improvement: relative_improvement(report.models[i].scores.f1, base_f1).ok(),
                });
            }
        }
        Ok(report)
    }

    pub fn has_undefined_test(&self) -> bool {
        self.comparisons.iter().any(|c| c.mcnemar.is_none())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        serde_json::from_str(s).map_err(|e| EvalError::Malformed { line: e.line(), reason: e.to_string() })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.models.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}  {:>5}  {:>5}",
            "model", "prec", "rec", "f1", "tp", "fp", "fn", "tn"
        );
        for m in &self.models {
            let c = m.scores.confusion;
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>5}  {:>5}  {:>5}  {:>5}",
                m.name, m.scores.precision, m.scores.recall, m.scores.f1, c.tp, c.fp, c.fn_, c.tn
            );
        }
        for c in &self.comparisons {
            let rel = c.relative_f1_improvement.map_or("n/a".to_string(), |r| format!("{r:+.1}%"));
            match &c.mcnemar {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{} vs {}: F1 {rel}, McNemar b={} c={} chi2={:.3} p={:.4}",
                        c.first, c.second, m.b, m.c, m.chi2, m.p_value
                    );
                }
                None => {
                    let _ =
                        writeln!(out, "{} vs {}: F1 {rel}, McNemar undefined (no discordant pairs)", c.first, c.second);
                }
            }
        }
        out
    }
}
