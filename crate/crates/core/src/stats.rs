//! Rank tests and the special functions behind their p-values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate groups: {0}")]
    DegenerateGroups(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degrees of freedom must be >= 1, got {0}")]
    InvalidDf(u32),
    #[error("argument must be finite and >= 0, got {0}")]
    InvalidArgument(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub df: Option<u32>,
}

/// Largest pooled sample for which Kruskal-Wallis enumerates exactly.
pub const KW_EXACT_MAX_N: usize = 10;
/// Largest `n_a + n_b` for which Mann-Whitney enumerates exactly.
pub const MW_EXACT_MAX_N: usize = 12;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
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

pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut sum = 1.0 / a;
    let mut term = sum;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    // modified Lentz
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
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
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: u32) -> Result<f64, StatsError> {
    if df < 1 {
        return Err(StatsError::InvalidDf(df));
    }
    if !(x >= 0.0) || !x.is_finite() {
        return Err(StatsError::InvalidArgument(x));
    }
    Ok(gamma_q(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0))
}

pub fn erfc(x: f64) -> f64 {
    let q = gamma_q(0.5, x * x);
    if x >= 0.0 {
        q
    } else {
        2.0 - q
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Midranks (1-based) of `values` and the sizes of tied runs.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn tie_term(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(StatsError::InvalidArgument(*v)),
        None => Ok(()),
    }
}

/// Kruskal-Wallis H with tie correction.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::DegenerateGroups(format!("{} group(s), need at least 2", groups.len())));
    }
    if let Some(i) = groups.iter().position(|g| g.is_empty()) {
        return Err(StatsError::DegenerateGroups(format!("group {i} is empty")));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    check_finite(&pooled)?;
    let n = pooled.len();
    if n < 3 {
        return Err(StatsError::TooFew { needed: 3, got: n });
    }
    let df = groups.len() as u32 - 1;
    let exact = n <= KW_EXACT_MAX_N;
    let method = if exact { Method::Exact } else { Method::Approximate };
    let (ranks, ties) = midranks(&pooled);
    let nf = n as f64;
    let correction = 1.0 - tie_term(&ties) / (nf * nf * nf - nf);
    if correction <= 0.0 {
        // every value identical
        return Ok(TestResult { statistic: 0.0, p_value: 1.0, method, df: Some(df) });
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let h_of = |sums: &[f64]| {
        let s: f64 = sums.iter().zip(&sizes).map(|(r, &m)| r * r / m as f64).sum();
        (12.0 / (nf * (nf + 1.0)) * s - 3.0 * (nf + 1.0)) / correction
    };
    let mut sums = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for &m in &sizes {
        sums.push(ranks[offset..offset + m].iter().sum::<f64>());
        offset += m;
    }
    let h = h_of(&sums).max(0.0);
    let p = if exact {
        kw_exact_p(&ranks, &sizes, h, &h_of)
    } else {
        chi_square_sf(h, df)?
    };
    Ok(TestResult { statistic: h, p_value: p, method, df: Some(df) })
}

/// Fraction of all assignments of `ranks` to groups of `sizes` whose H is at
/// least `h_obs`.
fn kw_exact_p(ranks: &[f64], sizes: &[usize], h_obs: f64, h_of: &dyn Fn(&[f64]) -> f64) -> f64 {
    struct Walk<'a> {
        ranks: &'a [f64],
        room: Vec<usize>,
        sums: Vec<f64>,
        threshold: f64,
        hits: u64,
        total: u64,
        h_of: &'a dyn Fn(&[f64]) -> f64,
    }
    fn go(w: &mut Walk, i: usize) {
        if i == w.ranks.len() {
            w.total += 1;
            if (w.h_of)(&w.sums) >= w.threshold {
                w.hits += 1;
            }
            return;
        }
        for g in 0..w.room.len() {
            if w.room[g] > 0 {
                w.room[g] -= 1;
                w.sums[g] += w.ranks[i];
                go(w, i + 1);
                w.sums[g] -= w.ranks[i];
                w.room[g] += 1;
            }
        }
    }
    let mut w = Walk {
        ranks,
        room: sizes.to_vec(),
        sums: vec![0.0; sizes.len()],
        threshold: h_obs - 1e-9 * h_obs.abs().max(1.0),
        hits: 0,
        total: 0,
        h_of,
    };
    go(&mut w, 0);
    w.hits as f64 / w.total as f64
}

/// Two-sided Mann-Whitney U. The statistic is U for `a`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::DegenerateGroups("both samples must be nonempty".into()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let mu = (na * nb) as f64 / 2.0;
    let n = na + nb;
    if n <= MW_EXACT_MAX_N {
        let p = mw_exact_p(&ranks, na, (u - mu).abs());
        return Ok(TestResult { statistic: u, p_value: p, method: Method::Exact, df: None });
    }
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term(&ties) / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(TestResult { statistic: u, p_value: p, method: Method::Approximate, df: None })
}

/// P(|U - mu| >= dev) over all ways to draw `na` of the pooled midranks.
fn mw_exact_p(ranks: &[f64], na: usize, dev: f64) -> f64 {
    let n = ranks.len();
    let mu = (na * (n - na)) as f64 / 2.0;
    let offset = (na * (na + 1)) as f64 / 2.0;
    let threshold = dev - 1e-9;
    let (mut hits, mut total) = (0u64, 0u64);
    // subsets of size na as bitmasks
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let r: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if (r - offset - mu).abs() >= threshold {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// One row of a post-hoc comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    pub u: f64,
    pub p_value: f64,
    pub method: Method,
    pub significant: bool,
}

/// Mann-Whitney U for every pair of labelled groups, uncorrected.
pub fn pairwise_mann_whitney(labels: &[String], groups: &[Vec<f64>], alpha: f64) -> Result<Vec<PairwiseComparison>, StatsError> {
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let r = mann_whitney_u(&groups[i], &groups[j])?;
            out.push(PairwiseComparison {
                a: labels[i].clone(),
                b: labels[j].clone(),
                u: r.statistic,
                p_value: r.p_value,
                method: r.method,
                significant: r.p_value < alpha,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub sd: f64,
}

pub fn mean(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    }
}

pub fn describe(samples: &[f64]) -> Result<Summary, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: samples.len() });
    }
    let m = mean(samples).unwrap();
    let ss: f64 = samples.iter().map(|x| (x - m) * (x - m)).sum();
    Ok(Summary { n: samples.len(), mean: m, sd: (ss / (samples.len() - 1) as f64).sqrt() })
}
