//! Binary detection and privacy metrics.
//!
//! Discrimination: [`auc`], [`eer`], [`cllr_min`]. Calibration-sensitive cost:
//! [`cllr`] and [`ece`]. Privacy disclosure: [`zebra`] (expected disclosure
//! `D_ECE` in bits, the worst-case strength of evidence and its categorical tag)
//! and the discrete/continuous [`mutual_information`] estimator.
//!
//! Every LLR here is a natural logarithm; costs are reported in bits.

use std::f64::consts::LN_2;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::calibration::{self, unit_bin_index, unit_bins, ScoreSet};
use crate::error::{Error, Result};

/// Number of points of the uniform prior grid used to integrate `D_ECE`.
pub const DECE_GRID: usize = 1000;

/// Upper bound of `D_ECE`: the integral of binary entropy over the unit interval.
pub const DECE_MAX: f64 = 1.0 / (2.0 * LN_2);

/// Area under the ROC curve: P(target > non-target) + P(tie) / 2.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    scores.require_both()?;
    let mut all: Vec<(f64, bool)> = scores
        .target
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nontarget.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks, then Mann-Whitney U
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let nt = scores.target.len() as f64;
    let nn = scores.nontarget.len() as f64;
    Ok((rank_sum - nt * (nt + 1.0) / 2.0) / (nt * nn))
}

/// Equal error rate, reported in [0, 0.5].
///
/// A threshold `t` accepts scores `>= t`. Along the ROC staircase the miss rate
/// rises and the false-alarm rate falls; the crossing is interpolated linearly
/// between the two vertices where their difference changes sign. Detectors worse
/// than chance are capped at 0.5; apply [`canonical_polarity`] first to report the
/// better-oriented direction.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    scores.require_both()?;
    let mut all: Vec<(f64, bool)> = scores
        .target
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nontarget.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nt = scores.target.len() as f64;
    let nn = scores.nontarget.len() as f64;

    // vertex before any rejection: miss 0, false alarm 1
    let (mut miss, mut fa) = (0.0f64, 1.0f64);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut t, mut n) = (0usize, 0usize);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                t += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        let next_miss = miss + t as f64 / nt;
        let next_fa = fa - n as f64 / nn;
        let before = miss - fa;
        let after = next_miss - next_fa;
        if before <= 0.0 && after >= 0.0 {
            let value = if after == before {
                miss
            } else {
                let lambda = -before / (after - before);
                miss + lambda * (next_miss - miss)
            };
            return Ok(value.min(0.5));
        }
        miss = next_miss;
        fa = next_fa;
        i = j;
    }
    unreachable!("miss - false alarm goes from -1 to +1")
}

/// `log2(1 + exp(x))`, exact at infinities.
fn log2_1p_exp(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else if x > 0.0 {
        (x + (-x).exp().ln_1p()) / LN_2
    } else {
        x.exp().ln_1p() / LN_2
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// Log-likelihood-ratio cost in bits.
pub fn cllr(target_llr: &[f64], nontarget_llr: &[f64]) -> Result<f64> {
    if target_llr.is_empty() || nontarget_llr.is_empty() {
        return Err(Error::Data("cllr needs both target and non-target LLRs".into()));
    }
    let tar = mean(target_llr.iter().map(|&l| log2_1p_exp(-l)));
    let non = mean(nontarget_llr.iter().map(|&l| log2_1p_exp(l)));
    Ok(0.5 * (tar + non))
}

/// Cllr after oracle (PAV) calibration: the discrimination-only part of the cost.
pub fn cllr_min(scores: &ScoreSet) -> Result<f64> {
    let llrs = calibration::oracle_llrs(scores)?;
    cllr(&llrs.target, &llrs.nontarget)
}

/// Empirical cross-entropy (bits) of LLRs at prior `prior` for the target hypothesis.
pub fn ece(target_llr: &[f64], nontarget_llr: &[f64], prior: f64) -> Result<f64> {
    if target_llr.is_empty() || nontarget_llr.is_empty() {
        return Err(Error::Data("ece needs both target and non-target LLRs".into()));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::Config(format!("prior {prior} outside (0, 1)")));
    }
    let log_odds = (prior / (1.0 - prior)).ln();
    let tar = mean(target_llr.iter().map(|&l| log2_1p_exp(-l - log_odds)));
    let non = mean(nontarget_llr.iter().map(|&l| log2_1p_exp(l + log_odds)));
    Ok(prior * tar + (1.0 - prior) * non)
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
    }
}

/// Categorical worst-case strength-of-evidence tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    #[serde(rename = "0")]
    Zero,
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Tag {
    /// Looks up the tag for a worst-case `|log10 LR|`.
    pub fn from_log10_lw(log10_lw: f64) -> Tag {
        match log10_lw.abs() {
            x if x == 0.0 => Tag::Zero,
            x if x <= 1.0 => Tag::A,
            x if x <= 2.0 => Tag::B,
            x if x <= 4.0 => Tag::C,
            x if x <= 5.0 => Tag::D,
            x if x <= 6.0 => Tag::E,
            _ => Tag::F,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::Zero => "0",
            Tag::A => "A",
            Tag::B => "B",
            Tag::C => "C",
            Tag::D => "D",
            Tag::E => "E",
            Tag::F => "F",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZebraReport {
    /// Expected privacy disclosure in bits, in `[0, DECE_MAX]`.
    pub d_ece: f64,
    /// Largest `|log10 LR|` over the oracle-calibrated scores.
    pub log10_lw: f64,
    pub tag: Tag,
}

/// Zero-evidence assessment of a score set.
///
/// Scores are oracle-calibrated with PAV. `D_ECE` integrates `H(π) − ECE(π)` over
/// a uniform grid of [`DECE_GRID`] priors with the trapezoid rule, using the exact
/// (possibly infinite) calibrated LLRs. The worst case uses the smoothed LLRs, which
/// are finite.
pub fn zebra(scores: &ScoreSet) -> Result<ZebraReport> {
    scores.require_both()?;
    let (raw, labels) = scores.to_labeled();
    let map = calibration::pav_fit(&raw, &labels)?;
    let exact = |s: &f64| calibration::posterior_to_llr_exact(map.apply(*s), map.prior());
    let tar: Vec<f64> = scores.target.iter().map(exact).collect();
    let non: Vec<f64> = scores.nontarget.iter().map(exact).collect();

    let step = 1.0 / (DECE_GRID - 1) as f64;
    let gap = |i: usize| -> Result<f64> {
        let prior = i as f64 * step;
        if i == 0 || i == DECE_GRID - 1 {
            return Ok(0.0);
        }
        Ok(binary_entropy(prior) - ece(&tar, &non, prior)?)
    };
    let mut d_ece = 0.0;
    let mut prev = gap(0)?;
    for i in 1..DECE_GRID {
        let cur = gap(i)?;
        d_ece += 0.5 * (prev + cur) * step;
        prev = cur;
    }

    let log10_lw = raw
        .iter()
        .map(|&s| (map.llr(s) / std::f64::consts::LN_10).abs())
        .fold(0.0, f64::max);
    Ok(ZebraReport {
        d_ece,
        log10_lw,
        tag: Tag::from_log10_lw(log10_lw),
    })
}

/// Orientation chosen by [`canonical_polarity`].
#[derive(Debug, Clone, PartialEq)]
pub struct Canonical {
    pub scores: ScoreSet,
    /// True when the scores were negated (equivalently, the labels swapped).
    pub swapped: bool,
}

/// Returns the orientation of `scores` with the lower `Cllr_min`.
///
/// Exact ties fall back to the orientation with `AUC >= 0.5`, then to the one with
/// the larger target-minus-non-target mean, so negating the input yields the same
/// canonical set whenever the two orientations are distinguishable.
pub fn canonical_polarity(scores: &ScoreSet) -> Result<Canonical> {
    let negated = scores.negated();
    let keep = cllr_min(scores)?;
    let flip = cllr_min(&negated)?;
    let swap = if keep != flip {
        flip < keep
    } else {
        let a = auc(scores)?;
        if a != 0.5 {
            a < 0.5
        } else {
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            m(&scores.target) < m(&scores.nontarget)
        }
    };
    Ok(if swap {
        Canonical {
            scores: negated,
            swapped: true,
        }
    } else {
        Canonical {
            scores: scores.clone(),
            swapped: false,
        }
    })
}

/// Per-class histogram over [0, 1] with aligned bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bin_width: f64,
    pub centers: Vec<f64>,
    pub target_counts: Vec<usize>,
    pub nontarget_counts: Vec<usize>,
}

pub fn score_histogram(scores: &ScoreSet, bin_width: f64) -> Result<ScoreHistogram> {
    let n = unit_bins(bin_width)?;
    let count = |v: &[f64]| {
        let mut c = vec![0usize; n];
        for &s in v {
            c[unit_bin_index(s, n, bin_width)] += 1;
        }
        c
    };
    Ok(ScoreHistogram {
        bin_width,
        centers: (0..n).map(|b| (b as f64 + 0.5) * bin_width).collect(),
        target_counts: count(&scores.target),
        nontarget_counts: count(&scores.nontarget),
    })
}

/// Mutual information (bits) between one continuous variable and a binary label,
/// with the nearest-neighbour estimator for discrete/continuous pairs.
///
/// For each sample, `d` is the distance to its `k`-th nearest neighbour with the same
/// label and `m` counts all other samples within `d` (ties count as inside). The
/// estimate `ψ(N) − ⟨ψ(N_y)⟩ + ψ(k) − ⟨ψ(m)⟩` is converted to bits and clamped at 0.
pub fn mutual_information_1d(values: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::Data("values and labels differ in length".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut by_class: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (&v, &y) in values.iter().zip(labels) {
        by_class[usize::from(y.min(1))].push(v);
    }
    for (c, vals) in by_class.iter_mut().enumerate() {
        if vals.len() <= k {
            return Err(Error::Data(format!(
                "class {c} has {} samples; need more than k = {k}",
                vals.len()
            )));
        }
        vals.sort_by(f64::total_cmp);
    }
    let mut all = values.to_vec();
    all.sort_by(f64::total_cmp);

    let n = values.len() as f64;
    let mut sum_psi_m = 0.0;
    let mut sum_psi_ny = 0.0;
    for (&v, &y) in values.iter().zip(labels) {
        let class = &by_class[usize::from(y.min(1))];
        let radius = kth_neighbour_distance(class, v, k);
        let lo = all.partition_point(|&x| x < v - radius);
        let hi = all.partition_point(|&x| x <= v + radius);
        let m = (hi - lo - 1).max(1);
        sum_psi_m += digamma(m as f64);
        sum_psi_ny += digamma(class.len() as f64);
    }
    let nats = digamma(n) - sum_psi_ny / n + digamma(k as f64) - sum_psi_m / n;
    Ok((nats / LN_2).max(0.0))
}

/// Distance from `v` (a member of the sorted slice) to its `k`-th nearest other member.
fn kth_neighbour_distance(sorted: &[f64], v: f64, k: usize) -> f64 {
    let pos = sorted.partition_point(|&x| x < v);
    // `pos` is the first copy of v; skip exactly one copy (the sample itself)
    let (mut left, mut right) = (pos as isize - 1, pos + 1);
    let mut dist = 0.0;
    for _ in 0..k {
        let dl = if left >= 0 {
            v - sorted[left as usize]
        } else {
            f64::INFINITY
        };
        let dr = if right < sorted.len() {
            sorted[right] - v
        } else {
            f64::INFINITY
        };
        if dl <= dr {
            dist = dl;
            left -= 1;
        } else {
            dist = dr;
            right += 1;
        }
    }
    dist
}

/// Mutual information between each vector coordinate and the label, averaged over
/// coordinates (bits per dimension).
pub fn mutual_information(vectors: &[Vec<f64>], labels: &[u8], k: usize) -> Result<f64> {
    let Some(first) = vectors.first() else {
        return Err(Error::Data("no vectors".into()));
    };
    let d = first.len();
    let mut column = vec![0.0; vectors.len()];
    let mut total = 0.0;
    for j in 0..d {
        for (c, v) in column.iter_mut().zip(vectors) {
            Error::check_dim(d, v.len())?;
            *c = v[j];
        }
        total += mutual_information_1d(&column, labels, k)?;
    }
    Ok(total / d as f64)
}
