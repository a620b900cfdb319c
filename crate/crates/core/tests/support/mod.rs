//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the code under test except where a sweep needs it.
#![allow(dead_code)]

use std::collections::HashMap;

use deltapad_core::kinematics::inverse_kinematics;
use deltapad_core::protocol::{angle_to_pulse, counts_to_pulse, pulse_to_angle, pulse_to_counts, ServoCalibration};
use deltapad_core::{DeltaGeometry, Pose, WorkspaceSpec};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// kinematics

/// Uniform sample in the cylinder (area-correct radius).
pub fn cylinder_pose(rng: &mut impl Rng, spec: &WorkspaceSpec) -> Pose {
    let r = spec.radius * rng.random::<f64>().sqrt();
    let a = rng.random::<f64>() * std::f64::consts::TAU;
    let z = spec.z_min + rng.random::<f64>() * spec.z_travel;
    Pose::new(r * a.cos(), r * a.sin(), z)
}

pub fn fd_jacobian(g: &DeltaGeometry, p: &Pose, h: f64) -> Matrix3<f64> {
    let mut j = Matrix3::zeros();
    for k in 0..3 {
        let mut plus = p.to_vector();
        let mut minus = p.to_vector();
        plus[k] += h;
        minus[k] -= h;
        let tp = inverse_kinematics(g, &Pose::from_vector(&plus)).unwrap();
        let tm = inverse_kinematics(g, &Pose::from_vector(&minus)).unwrap();
        for i in 0..3 {
            j[(i, k)] = (tp.theta[i] - tm.theta[i]) / (2.0 * h);
        }
    }
    j
}

// protocol

/// Bit-serial CRC-8 (poly x^8 + x^2 + x + 1), shifting the message through
/// a register one bit at a time with eight zero bits appended.
pub fn crc8_oracle(data: &[u8]) -> u8 {
    let mut reg: u16 = 0;
    let bits = data.iter().flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1)).chain(std::iter::repeat_n(0, 8));
    for bit in bits {
        reg = (reg << 1) | bit as u16;
        if reg & 0x100 != 0 {
            reg ^= 0x107;
        }
    }
    reg as u8
}

/// Sweep -90..90 deg in 0.01 deg steps through angle -> wire pulse (whole us)
/// -> PCA9685 counts. Returns the worst angle error in degrees after the wire
/// pulse and after the counts, asserting monotonicity on the way.
pub fn chain_errors(cal: &ServoCalibration) -> (f64, f64) {
    let mut worst_pulse: f64 = 0.0;
    let mut worst_counts: f64 = 0.0;
    let mut prev_pulse = 0.0;
    let mut prev_counts = 0;
    for k in 0..=18_000 {
        let deg = -90.0 + k as f64 * 0.01;
        let p = angle_to_pulse(deg.to_radians(), cal, 0);
        assert!(p.us >= prev_pulse);
        prev_pulse = p.us;
        let wire = p.us.round();
        worst_pulse = worst_pulse.max((pulse_to_angle(wire, cal, 0).to_degrees() - deg).abs());
        let counts = pulse_to_counts(wire).unwrap();
        assert!(counts >= prev_counts);
        prev_counts = counts;
        let seen = pulse_to_angle(counts_to_pulse(counts), cal, 0).to_degrees();
        worst_counts = worst_counts.max((seen - deg).abs());
    }
    (worst_pulse, worst_counts)
}

// statistics

/// Midrank by counting, O(n^2).
pub fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// H from the between-group sum of squares of mean ranks, tie corrected.
pub fn naive_h(groups: &[Vec<f64>]) -> f64 {
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let ranks = naive_ranks(&pooled);
    let grand = (n + 1.0) / 2.0;
    let mut off = 0;
    let mut ss = 0.0;
    for g in groups {
        let m = g.len();
        let mean = ranks[off..off + m].iter().sum::<f64>() / m as f64;
        ss += m as f64 * (mean - grand).powi(2);
        off += m;
    }
    let mut ties = 0.0;
    let mut seen: Vec<f64> = Vec::new();
    for x in &pooled {
        if !seen.contains(x) {
            seen.push(*x);
            let t = pooled.iter().filter(|y| *y == x).count() as f64;
            ties += t * t * t - t;
        }
    }
    let corr = 1.0 - ties / (n * n * n - n);
    if corr <= 0.0 {
        return 0.0;
    }
    12.0 / (n * (n + 1.0)) * ss / corr
}

/// Every way to split the pooled values into groups of the given sizes.
pub fn partitions(items: &[f64], sizes: &[usize], out: &mut Vec<Vec<Vec<f64>>>, acc: &mut Vec<Vec<f64>>) {
    if sizes.is_empty() {
        out.push(acc.clone());
        return;
    }
    let k = sizes[0];
    let n = items.len();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let (chosen, rest): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            items.iter().copied().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
        acc.push(chosen.into_iter().map(|p| p.1).collect());
        let rest: Vec<f64> = rest.into_iter().map(|p| p.1).collect();
        partitions(&rest, &sizes[1..], out, acc);
        acc.pop();
    }
}

pub fn kw_oracle(groups: &[Vec<f64>]) -> (f64, f64) {
    let h = naive_h(groups);
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut all = Vec::new();
    partitions(&pooled, &sizes, &mut all, &mut Vec::new());
    let hits = all.iter().filter(|p| naive_h(p) >= h - 1e-9).count();
    (h, hits as f64 / all.len() as f64)
}

/// U for `a` by pair counting.
pub fn naive_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

pub fn mw_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let u = naive_u(a, b);
    let mu = (a.len() * b.len()) as f64 / 2.0;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut all = Vec::new();
    partitions(&pooled, &[a.len(), b.len()], &mut all, &mut Vec::new());
    let hits = all.iter().filter(|p| (naive_u(&p[0], &p[1]) - mu).abs() >= (u - mu).abs() - 1e-9).count();
    (u, hits as f64 / all.len() as f64)
}

/// Composite Simpson on [a, b].
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Gamma(k/2) by the half-integer recursion.
pub fn half_gamma(k: u32) -> f64 {
    let mut g = if k.is_multiple_of(2) { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut a = if k.is_multiple_of(2) { 1.0 } else { 0.5 };
    while a < k as f64 / 2.0 - 1e-12 {
        g *= a;
        a += 1.0;
    }
    g
}

pub fn chi_square_cdf_oracle(x: f64, df: u32) -> f64 {
    // substitute t = u^2 so the integrand is smooth at 0 for every df
    let k = df as f64 / 2.0;
    let c = 2.0 / (2f64.powf(k) * half_gamma(df));
    simpson(|u| c * u.powf(2.0 * k - 1.0) * (-u * u / 2.0).exp(), 0.0, x.sqrt(), 20_000)
}

/// Exact null distribution of H for three groups of eight untied ranks, by
/// dynamic programming over (group sizes, rank sums).
pub struct Kw3x8 {
    /// (H, multiplicity), sorted by H descending
    pub table: Vec<(f64, u64)>,
    pub total: u64,
}

impl Kw3x8 {
    pub fn build() -> Self {
        const M: usize = 8;
        const N: usize = 24;
        const SMAX: usize = 8 * 24;
        let idx = |k1: usize, k2: usize, s1: usize, s2: usize| ((k1 * (M + 1) + k2) * (SMAX + 1) + s1) * (SMAX + 1) + s2;
        let size = (M + 1) * (M + 1) * (SMAX + 1) * (SMAX + 1);
        let mut cur = vec![0u64; size];
        cur[idx(0, 0, 0, 0)] = 1;
        for r in 1..=N {
            let mut next = vec![0u64; size];
            for k1 in 0..=M.min(r - 1) {
                for k2 in 0..=M.min(r - 1 - k1) {
                    let k3 = r - 1 - k1 - k2;
                    if k3 > M {
                        continue;
                    }
                    for s1 in 0..=SMAX {
                        for s2 in 0..=SMAX {
                            let c = cur[idx(k1, k2, s1, s2)];
                            if c == 0 {
                                continue;
                            }
                            if k1 < M {
                                next[idx(k1 + 1, k2, s1 + r, s2)] += c;
                            }
                            if k2 < M {
                                next[idx(k1, k2 + 1, s1, s2 + r)] += c;
                            }
                            if k3 < M {
                                next[idx(k1, k2, s1, s2)] += c;
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        let total_sum = N * (N + 1) / 2;
        let mut by_h: HashMap<u64, (f64, u64)> = HashMap::new();
        let mut total = 0;
        for s1 in 0..=SMAX {
            for s2 in 0..=SMAX {
                let c = cur[idx(M, M, s1, s2)];
                if c == 0 {
                    continue;
                }
                total += c;
                let s3 = total_sum - s1 - s2;
                let h = h_from_sums(&[s1 as f64, s2 as f64, s3 as f64], 8, 24);
                let e = by_h.entry((h * 1e6).round() as u64).or_insert((h, 0));
                e.1 += c;
            }
        }
        let mut table: Vec<(f64, u64)> = by_h.into_values().collect();
        table.sort_by(|a, b| b.0.total_cmp(&a.0));
        Kw3x8 { table, total }
    }

    pub fn p(&self, h: f64) -> f64 {
        let hits: u64 = self.table.iter().take_while(|(x, _)| *x >= h - 1e-6).map(|e| e.1).sum();
        hits as f64 / self.total as f64
    }
}

pub fn h_from_sums(sums: &[f64], m: usize, n: usize) -> f64 {
    let nf = n as f64;
    12.0 / (nf * (nf + 1.0)) * sums.iter().map(|r| r * r / m as f64).sum::<f64>() - 3.0 * (nf + 1.0)
}

/// Three groups of eight, half under the null and half with a location shift.
pub fn balanced_samples(seed: u64, count: usize) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let shift = if i % 2 == 0 { 0.0 } else { 0.3 };
            (0..3).map(|g| (0..8).map(|_| rng.random::<f64>() + shift * g as f64).collect()).collect()
        })
        .collect()
}
