//! Synthetic participant: answers drawn from a confusion matrix, confidence
//! from a rounded normal on the 1..5 scale.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patterns::{ContactPatternId, Mode, PatternId, StretchDirection};
use crate::stats::normal_cdf;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResponderError {
    #[error("confusion matrix must be {expected}x{expected}")]
    Shape { expected: usize },
    #[error("row {row} is not stochastic (sum {sum}, min {min})")]
    NotStochastic { row: usize, sum: f64, min: f64 },
    #[error("override for {row}->{col} leaves no room ({total} > 1)")]
    OverrideTooLarge { row: String, col: String, total: f64 },
    #[error("pattern {0} does not belong to {1} mode")]
    WrongMode(String, Mode),
    #[error("unknown pattern label {0:?}")]
    UnknownLabel(String),
    #[error("invalid confidence model: {0}")]
    Confidence(String),
    #[error("invalid heterogeneity shape {0}")]
    Heterogeneity(f64),
}

pub const CONFIDENCE_MIN: u8 = 1;
pub const CONFIDENCE_MAX: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub mean_correct: f64,
    pub sd_correct: f64,
    pub mean_incorrect: f64,
    pub sd_incorrect: f64,
}

impl ConfidenceModel {
    pub fn uniform(mean: f64, sd: f64) -> Self {
        Self { mean_correct: mean, sd_correct: sd, mean_incorrect: mean, sd_incorrect: sd }
    }

    fn validate(&self) -> Result<(), ResponderError> {
        for (m, s) in [(self.mean_correct, self.sd_correct), (self.mean_incorrect, self.sd_incorrect)] {
            if !(1.0..=5.0).contains(&m) || !(s >= 0.0) || !s.is_finite() {
                return Err(ResponderError::Confidence(format!("mean {m}, sd {s}")));
            }
        }
        Ok(())
    }
}

/// E[clamp(round(X), 1, 5)] for X ~ N(loc, sd).
pub fn rounded_mean(loc: f64, sd: f64) -> f64 {
    let cdf = |edge: f64| normal_cdf((edge - loc) / sd);
    let mut e = 0.0;
    for k in CONFIDENCE_MIN..=CONFIDENCE_MAX {
        let lo = if k == CONFIDENCE_MIN { 0.0 } else { cdf(k as f64 - 0.5) };
        let hi = if k == CONFIDENCE_MAX { 1.0 } else { cdf(k as f64 + 0.5) };
        e += k as f64 * (hi - lo);
    }
    e
}

/// Latent location whose rounded, clamped draws have mean `target`.
pub fn calibrate_location(target: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return target;
    }
    let (mut lo, mut hi) = (-20.0, 26.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rounded_mean(mid, sd) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub answer: PatternId,
    pub confidence: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ResponderFile", into = "ResponderFile")]
pub struct SyntheticResponder {
    pub mode: Mode,
    /// Row = presented pattern, column = answer, catalogue order.
    confusion: Vec<Vec<f64>>,
    pub confidence: ConfidenceModel,
    /// Gamma shape of the per-subject error multiplier; `None` for identical subjects.
    pub heterogeneity: Option<f64>,
    loc_correct: f64,
    loc_incorrect: f64,
}

#[derive(Serialize, Deserialize)]
struct ResponderFile {
    mode: Mode,
    labels: Vec<String>,
    confusion: Vec<Vec<f64>>,
    confidence: ConfidenceModel,
    #[serde(default)]
    heterogeneity: Option<f64>,
}

impl From<SyntheticResponder> for ResponderFile {
    fn from(r: SyntheticResponder) -> Self {
        Self {
            mode: r.mode,
            labels: r.mode.patterns().iter().map(|p| p.label().to_string()).collect(),
            confusion: r.confusion,
            confidence: r.confidence,
            heterogeneity: r.heterogeneity,
        }
    }
}

impl TryFrom<ResponderFile> for SyntheticResponder {
    type Error = ResponderError;

    fn try_from(f: ResponderFile) -> Result<Self, Self::Error> {
        let order: Vec<usize> = f
            .labels
            .iter()
            .map(|l| f.mode.parse_pattern(l).map(|p| p.index()).map_err(|_| ResponderError::UnknownLabel(l.clone())))
            .collect::<Result<_, _>>()?;
        let n = f.mode.pattern_count();
        if order.len() != n || f.confusion.len() != n || f.confusion.iter().any(|r| r.len() != n) {
            return Err(ResponderError::Shape { expected: n });
        }
        // rows and columns may be listed in any label order
        let mut m = vec![vec![0.0; n]; n];
        for (i, &ri) in order.iter().enumerate() {
            for (j, &cj) in order.iter().enumerate() {
                m[ri][cj] = f.confusion[i][j];
            }
        }
        SyntheticResponder::new(f.mode, m, f.confidence, f.heterogeneity)
    }
}

/// Cell overrides keyed by presented label, then answered label.
pub type ConfusionOverrides = BTreeMap<String, BTreeMap<String, f64>>;

fn idx(p: ContactPatternId) -> usize {
    p.index()
}

fn sidx(d: StretchDirection) -> usize {
    d.index()
}

/// Fill a row: fixed diagonal and named cells, remainder spread evenly over
/// the unnamed cells of the nearest neighbour ring that has any.
fn fill_row(row: &mut [f64], diag: usize, p: f64, named: &[(usize, f64)], rings: &[Vec<usize>]) {
    row[diag] = p;
    for &(j, v) in named {
        row[j] = v;
    }
    let rest = 1.0 - p - named.iter().map(|(_, v)| v).sum::<f64>();
    let targets = rings
        .iter()
        .map(|ring| ring.iter().copied().filter(|j| !named.iter().any(|(k, _)| k == j)).collect::<Vec<_>>())
        .find(|free| !free.is_empty())
        .expect("a ring with free cells");
    for &j in &targets {
        row[j] += rest / targets.len() as f64;
    }
}

fn default_contact_matrix() -> Vec<Vec<f64>> {
    use ContactPatternId::*;
    let ring = [R, UR, U, UL, L, DL, D, DR];
    let neighbours = |p: ContactPatternId| -> Vec<Vec<usize>> {
        if p == C {
            return vec![ring.iter().map(|&q| idx(q)).collect()];
        }
        let k = ring.iter().position(|&q| q == p).unwrap();
        vec![vec![idx(ring[(k + 1) % 8]), idx(ring[(k + 7) % 8]), idx(C)]]
    };
    let spec: [(ContactPatternId, f64, &[(ContactPatternId, f64)]); 9] = [
        (C, 0.93, &[]),
        (U, 0.85, &[(UL, 0.03)]),
        (D, 0.85, &[]),
        (L, 0.70, &[(DL, 0.12)]),
        (R, 0.70, &[(UR, 0.11), (DR, 0.05)]),
        (UL, 0.59, &[(U, 0.20)]),
        (UR, 0.78, &[(R, 0.11)]),
        (DL, 0.65, &[(L, 0.12)]),
        (DR, 0.70, &[(R, 0.15)]),
    ];
    let mut m = vec![vec![0.0; 9]; 9];
    for (p, diag, named) in spec {
        let named: Vec<(usize, f64)> = named.iter().map(|&(q, v)| (idx(q), v)).collect();
        fill_row(&mut m[idx(p)], idx(p), diag, &named, &neighbours(p));
    }
    m
}

fn default_stretch_matrix() -> Vec<Vec<f64>> {
    use StretchDirection::*;
    let spec: [(StretchDirection, f64, &[(StretchDirection, f64)]); 8] = [
        (U, 0.89, &[]),
        (UR, 0.80, &[]),
        (R, 0.86, &[]),
        (DR, 0.73, &[(R, 0.13), (D, 0.13)]),
        (D, 0.90, &[]),
        (DL, 0.82, &[]),
        (L, 0.85, &[]),
        (UL, 0.79, &[]),
    ];
    let mut m = vec![vec![0.0; 8]; 8];
    for (d, diag, named) in spec {
        let k = sidx(d);
        let named: Vec<(usize, f64)> = named.iter().map(|&(q, v)| (sidx(q), v)).collect();
        fill_row(&mut m[k], k, diag, &named, &[vec![(k + 1) % 8, (k + 7) % 8], vec![(k + 2) % 8, (k + 6) % 8]]);
    }
    m
}

/// Shape of the default per-subject error multiplier (mean 1).
pub const DEFAULT_HETEROGENEITY: f64 = 1.75;

impl SyntheticResponder {
    pub fn new(
        mode: Mode,
        confusion: Vec<Vec<f64>>,
        confidence: ConfidenceModel,
        heterogeneity: Option<f64>,
    ) -> Result<Self, ResponderError> {
        let r = Self {
            mode,
            confusion,
            confidence,
            heterogeneity,
            loc_correct: calibrate_location(confidence.mean_correct, confidence.sd_correct),
            loc_incorrect: calibrate_location(confidence.mean_incorrect, confidence.sd_incorrect),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn default_for(mode: Mode) -> Self {
        match mode {
            Mode::Contact => Self::new(mode, default_contact_matrix(), ConfidenceModel::uniform(4.4, 0.6), Some(DEFAULT_HETEROGENEITY)),
            Mode::Stretch => Self::new(mode, default_stretch_matrix(), ConfidenceModel::uniform(4.5, 0.5), Some(DEFAULT_HETEROGENEITY)),
        }
        .expect("default responder is valid")
    }

    /// Always answers correctly with top confidence.
    pub fn perfect(mode: Mode) -> Self {
        let n = mode.pattern_count();
        let m = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(mode, m, ConfidenceModel::uniform(5.0, 0.0), None).unwrap()
    }

    pub fn confusion(&self) -> &[Vec<f64>] {
        &self.confusion
    }

    pub fn validate(&self) -> Result<(), ResponderError> {
        let n = self.mode.pattern_count();
        if self.confusion.len() != n || self.confusion.iter().any(|r| r.len() != n) {
            return Err(ResponderError::Shape { expected: n });
        }
        for (row, r) in self.confusion.iter().enumerate() {
            let sum: f64 = r.iter().sum();
            let min = r.iter().copied().fold(f64::INFINITY, f64::min);
            if (sum - 1.0).abs() > 1e-9 || min < 0.0 || !sum.is_finite() {
                return Err(ResponderError::NotStochastic { row, sum, min });
            }
        }
        self.confidence.validate()?;
        if let Some(k) = self.heterogeneity {
            if !(k > 0.0) || !k.is_finite() {
                return Err(ResponderError::Heterogeneity(k));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Mean diagonal of the population matrix.
    pub fn mean_rate(&self) -> f64 {
        self.confusion.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / self.confusion.len() as f64
    }

    /// Set individual cells. Within each touched row the untouched cells are
    /// rescaled so the row still sums to one.
    pub fn merge(&self, overrides: &ConfusionOverrides) -> Result<Self, ResponderError> {
        let mut m = self.confusion.clone();
        for (row_label, cells) in overrides {
            let row = self.parse(row_label)?;
            let mut fixed = vec![None; m.len()];
            for (col_label, &v) in cells {
                let col = self.parse(col_label)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(ResponderError::NotStochastic { row, sum: v, min: v });
                }
                fixed[col] = Some(v);
            }
            let fixed_sum: f64 = fixed.iter().flatten().sum();
            let free_sum: f64 = (0..m.len()).filter(|&j| fixed[j].is_none()).map(|j| m[row][j]).sum();
            let rest = 1.0 - fixed_sum;
            let free_count = fixed.iter().filter(|f| f.is_none()).count();
            if rest < -1e-12 || (free_count == 0 && rest.abs() > 1e-9) {
                return Err(ResponderError::OverrideTooLarge {
                    row: row_label.clone(),
                    col: cells.keys().cloned().collect::<Vec<_>>().join(","),
                    total: fixed_sum,
                });
            }
            let rest = rest.max(0.0);
            for j in 0..m.len() {
                m[row][j] = match fixed[j] {
                    Some(v) => v,
                    None if free_sum > 0.0 => m[row][j] * rest / free_sum,
                    None => rest / free_count as f64,
                };
            }
        }
        Self::new(self.mode, m, self.confidence, self.heterogeneity)
    }

    fn parse(&self, label: &str) -> Result<usize, ResponderError> {
        self.mode
            .parse_pattern(label)
            .map(|p| p.index())
            .map_err(|_| ResponderError::UnknownLabel(label.to_string()))
    }

    /// Draw one cohort member: every error rate scaled by a Gamma(k, 1/k)
    /// multiplier, off-diagonal cells keeping their proportions.
    pub fn subject<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let Some(shape) = self.heterogeneity else {
            return self.clone();
        };
        let m: f64 = Gamma::new(shape, 1.0 / shape).unwrap().sample(rng);
        let confusion = self
            .confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let err = 1.0 - row[i];
                let diag = (1.0 - err * m).max(0.0);
                let scale = if err > 0.0 { (1.0 - diag) / err } else { 0.0 };
                row.iter().enumerate().map(|(j, &v)| if j == i { diag } else { v * scale }).collect()
            })
            .collect();
        Self {
            confusion,
            heterogeneity: None,
            ..self.clone()
        }
    }

    pub fn respond<R: Rng + ?Sized>(&self, truth: PatternId, rng: &mut R) -> Result<Response, ResponderError> {
        if truth.mode() != self.mode {
            return Err(ResponderError::WrongMode(truth.label().into(), self.mode));
        }
        let row = &self.confusion[truth.index()];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        // guard against float shortfall landing on a zero cell
        while row[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        let answer = self.mode.patterns()[pick];
        let (loc, sd) = if answer == truth {
            (self.loc_correct, self.confidence.sd_correct)
        } else {
            (self.loc_incorrect, self.confidence.sd_incorrect)
        };
        let latent = if sd > 0.0 { Normal::new(loc, sd).unwrap().sample(rng) } else { loc };
        let confidence = latent.round().clamp(CONFIDENCE_MIN as f64, CONFIDENCE_MAX as f64) as u8;
        Ok(Response { answer, confidence })
    }
}

/// One response from a fresh generator seeded with `seed`.
pub fn synthetic_response(r: &SyntheticResponder, truth: PatternId, seed: u64) -> Result<Response, ResponderError> {
    r.respond(truth, &mut ChaCha8Rng::seed_from_u64(seed))
}
