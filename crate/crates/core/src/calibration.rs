//! Oracle calibration with the pool-adjacent-violators (PAV) algorithm.
//!
//! [`pav_fit`] computes the isotonic (monotone non-decreasing) least-squares fit of
//! binary labels on raw scores. The result is a [`CalibrationMap`], a step function
//! from raw score to posterior probability of label 1. Posteriors convert to natural
//! log-likelihood ratios by removing the empirical prior log-odds.
//!
//! ```
//! use veilvec::calibration::pav_fit;
//!
//! let map = pav_fit(&[0.1, 0.35, 0.4, 0.8], &[0, 1, 0, 1]).unwrap();
//! assert_eq!(map.apply(0.1), 0.0);
//! assert_eq!(map.apply(0.37), 0.5);
//! assert_eq!(map.apply(0.9), 1.0);
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio;

const PAV_MAGIC: &str = "veilvec-pav v1";
const SCORES_MAGIC: &str = "veilvec-scores v1";

/// Scores split by ground truth: targets carry label 1, non-targets label 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        Self { target, nontarget }
    }

    pub fn from_labeled(scores: &[f64], labels: &[u8]) -> Result<Self> {
        check_lengths(scores, labels)?;
        let mut set = ScoreSet::default();
        for (&s, &y) in scores.iter().zip(labels) {
            if y == 1 {
                set.target.push(s);
            } else {
                set.nontarget.push(s);
            }
        }
        Ok(set)
    }

    /// Scores followed by their labels, targets first.
    pub fn to_labeled(&self) -> (Vec<f64>, Vec<u8>) {
        let scores = self.target.iter().chain(&self.nontarget).copied().collect();
        let labels = std::iter::repeat_n(1u8, self.target.len())
            .chain(std::iter::repeat_n(0u8, self.nontarget.len()))
            .collect();
        (scores, labels)
    }

    pub fn len(&self) -> usize {
        self.target.len() + self.nontarget.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Errors unless both sides are non-empty.
    pub fn require_both(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::Data(format!(
                "score set needs both sides, got {} target and {} non-target scores",
                self.target.len(),
                self.nontarget.len()
            )));
        }
        Ok(())
    }

    /// All scores negated, which reverses the direction of evidence.
    pub fn negated(&self) -> Self {
        Self {
            target: self.target.iter().map(|s| -s).collect(),
            nontarget: self.nontarget.iter().map(|s| -s).collect(),
        }
    }

    /// Fraction of scores carrying label 1.
    pub fn empirical_prior(&self) -> f64 {
        self.target.len() as f64 / self.len() as f64
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label {y} is not binary")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Monotone step function from raw score to posterior of label 1.
///
/// Block `i` covers raw scores in `(upper[i-1], upper[i]]`; scores below the first
/// boundary map to the first block and scores above the last map to the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    upper: Vec<f64>,
    posterior: Vec<f64>,
    counts: Vec<usize>,
    prior: f64,
}

impl CalibrationMap {
    pub fn new(upper: Vec<f64>, posterior: Vec<f64>, counts: Vec<usize>, prior: f64) -> Result<Self> {
        if upper.is_empty() || upper.len() != posterior.len() || upper.len() != counts.len() {
            return Err(Error::Data("calibration map needs matching, non-empty blocks".into()));
        }
        if counts.contains(&0) {
            return Err(Error::Data("calibration blocks must be non-empty".into()));
        }
        if upper.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Data("calibration breakpoints must be strictly ascending".into()));
        }
        if posterior.iter().any(|p| !(0.0..=1.0).contains(p)) || posterior.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data(
                "calibration posteriors must be non-decreasing in [0, 1]".into(),
            ));
        }
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::Data("calibration map needs a prior in (0, 1)".into()));
        }
        Ok(Self {
            upper,
            posterior,
            counts,
            prior,
        })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.upper
    }

    pub fn block_posteriors(&self) -> &[f64] {
        &self.posterior
    }

    /// Number of fitting items in each block.
    pub fn block_counts(&self) -> &[usize] {
        &self.counts
    }

    /// Number of items the map was fitted on.
    pub fn n_items(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Proportion of label-1 items in the fitting data.
    pub fn prior(&self) -> f64 {
        self.prior
    }

    fn block(&self, raw: f64) -> usize {
        self.upper.partition_point(|&u| u < raw).min(self.posterior.len() - 1)
    }

    /// Posterior for a raw score.
    pub fn apply(&self, raw: f64) -> f64 {
        self.posterior[self.block(raw)]
    }

    /// Smoothed natural-log LLR for a raw score; always finite.
    pub fn llr(&self, raw: f64) -> f64 {
        let b = self.block(raw);
        posterior_to_llr(self.posterior[b], self.prior, self.counts[b])
    }
}

/// Isotonic regression of `labels` on `scores` by pool-adjacent-violators.
///
/// Tied scores are pooled into one block before any merging.
pub fn pav_fit(scores: &[f64], labels: &[u8]) -> Result<CalibrationMap> {
    check_lengths(scores, labels)?;
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::Data("PAV calibration needs both labels present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // (positives, count, upper raw score); means compared exactly in integers.
    // Equal neighbours are pooled too, so each block is a maximal level set.
    let mut blocks: Vec<(u64, u64, f64)> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut cnt) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            pos += u64::from(labels[order[i]]);
            cnt += 1;
            i += 1;
        }
        let mut cur = (pos, cnt, s);
        while let Some(&(ppos, pcnt, _)) = blocks.last() {
            if ppos * cur.1 >= cur.0 * pcnt {
                blocks.pop();
                cur = (cur.0 + ppos, cur.1 + pcnt, cur.2);
            } else {
                break;
            }
        }
        blocks.push(cur);
    }

    let upper = blocks.iter().map(|b| b.2).collect();
    let posterior = blocks.iter().map(|b| b.0 as f64 / b.1 as f64).collect();
    let counts = blocks.iter().map(|b| b.1 as usize).collect();
    CalibrationMap::new(upper, posterior, counts, ones as f64 / labels.len() as f64)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Natural-log LLR of a posterior relative to `prior`.
///
/// A posterior of exactly 0 or 1 from a block of `block_size` items is first replaced
/// by `(block_size * posterior + prior) / (block_size + 1)`, one pseudo-item at the
/// prior, so the result is finite and grows with the evidence behind the block.
pub fn posterior_to_llr(posterior: f64, prior: f64, block_size: usize) -> f64 {
    let p = if posterior <= 0.0 || posterior >= 1.0 {
        let n = block_size as f64;
        (n * posterior.clamp(0.0, 1.0) + prior) / (n + 1.0)
    } else {
        posterior
    };
    logit(p) - logit(prior)
}

/// Unsmoothed LLR: posteriors of exactly 0 or 1 give -inf or +inf.
pub fn posterior_to_llr_exact(posterior: f64, prior: f64) -> f64 {
    if posterior <= 0.0 {
        f64::NEG_INFINITY
    } else if posterior >= 1.0 {
        f64::INFINITY
    } else {
        logit(posterior) - logit(prior)
    }
}

/// Oracle (PAV) calibrated LLRs of a score set, split like the input.
/// Uses [`posterior_to_llr_exact`], so perfectly separated sets give infinite LLRs.
pub fn oracle_llrs(scores: &ScoreSet) -> Result<ScoreSet> {
    scores.require_both()?;
    let (raw, labels) = scores.to_labeled();
    let map = pav_fit(&raw, &labels)?;
    let conv = |s: &f64| posterior_to_llr_exact(map.apply(*s), map.prior());
    Ok(ScoreSet {
        target: scores.target.iter().map(conv).collect(),
        nontarget: scores.nontarget.iter().map(conv).collect(),
    })
}

/// One bin of an empirical calibration plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub center: f64,
    /// Fraction of label-1 items among the bin's items.
    pub proportion: f64,
    pub count: usize,
}

/// Number of bins of width `w` covering [0, 1].
pub(crate) fn unit_bins(bin_width: f64) -> Result<usize> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::Config(format!("bin width {bin_width} outside (0, 1]")));
    }
    Ok(((1.0 / bin_width) - 1e-9).ceil().max(1.0) as usize)
}

pub(crate) fn unit_bin_index(score: f64, n_bins: usize, bin_width: f64) -> usize {
    ((score.clamp(0.0, 1.0) / bin_width).floor() as usize).min(n_bins - 1)
}

/// Empirical calibration plot over [0, 1]: per-bin proportion of label-1 items.
/// Empty bins are omitted; scores outside [0, 1] fall in the edge bins.
pub fn calibration_plot(scores: &[f64], labels: &[u8], bin_width: f64) -> Result<Vec<CalibrationBin>> {
    check_lengths(scores, labels)?;
    let n_bins = unit_bins(bin_width)?;
    let mut pos = vec![0usize; n_bins];
    let mut cnt = vec![0usize; n_bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = unit_bin_index(s, n_bins, bin_width);
        cnt[b] += 1;
        pos[b] += usize::from(y);
    }
    Ok((0..n_bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| CalibrationBin {
            center: (b as f64 + 0.5) * bin_width,
            proportion: pos[b] as f64 / cnt[b] as f64,
            count: cnt[b],
        })
        .collect())
}

pub fn map_to_text(map: &CalibrationMap) -> String {
    let mut out = String::new();
    writeln!(out, "{PAV_MAGIC} prior={}", textio::fmt_f64(map.prior)).unwrap();
    for ((u, p), n) in map.upper.iter().zip(&map.posterior).zip(&map.counts) {
        writeln!(out, "{} {} {n}", textio::fmt_f64(*u), textio::fmt_f64(*p)).unwrap();
    }
    out
}

pub fn save_map(map: &CalibrationMap, path: impl AsRef<Path>) -> Result<()> {
    textio::write_file(path.as_ref(), &map_to_text(map))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<CalibrationMap> {
    let path = path.as_ref();
    parse_map(path, &textio::read_to_string(path)?)
}

pub fn parse_map(path: &Path, text: &str) -> Result<CalibrationMap> {
    let file = textio::split_header(path, text)?;
    let mut prior = None;
    for (k, v) in textio::header_fields(path, &file, PAV_MAGIC)? {
        match k {
            "prior" => prior = Some(textio::parse_f64(path, file.header_line, v)?),
            _ => return Err(Error::parse(path, file.header_line, format!("unknown field `{k}`"))),
        }
    }
    let Some(prior) = prior else {
        return Err(Error::parse(path, file.header_line, "header needs `prior=`"));
    };
    let (mut upper, mut posterior, mut counts) = (Vec::new(), Vec::new(), Vec::new());
    for (line, content) in &file.body {
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(
                path,
                *line,
                "expected `<upper_raw_boundary> <posterior> <count>`",
            ));
        }
        upper.push(textio::parse_f64(path, *line, toks[0])?);
        posterior.push(textio::parse_f64(path, *line, toks[1])?);
        counts.push(textio::parse_usize(path, *line, toks[2])?);
    }
    let last = file.body.last().map_or(file.header_line, |(l, _)| *l);
    CalibrationMap::new(upper, posterior, counts, prior).map_err(|e| Error::parse(path, last, e.to_string()))
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub segment_id: String,
    pub label: u8,
    pub raw: f64,
    pub calibrated: Option<f64>,
}

pub fn scores_to_text(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "{SCORES_MAGIC}").unwrap();
    for r in records {
        write!(out, "{} {} {}", r.segment_id, r.label, textio::fmt_f64(r.raw)).unwrap();
        if let Some(c) = r.calibrated {
            write!(out, " {}", textio::fmt_f64(c)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    textio::write_file(path.as_ref(), &scores_to_text(records))
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    parse_scores(path, &textio::read_to_string(path)?)
}

pub fn parse_scores(path: &Path, text: &str) -> Result<Vec<ScoreRecord>> {
    let file = textio::split_header(path, text)?;
    if !textio::header_fields(path, &file, SCORES_MAGIC)?.is_empty() {
        return Err(Error::parse(path, file.header_line, "unexpected header fields"));
    }
    file.body
        .iter()
        .map(|&(line, content)| {
            let toks: Vec<&str> = content.split_whitespace().collect();
            if !(3..=4).contains(&toks.len()) {
                return Err(Error::parse(
                    path,
                    line,
                    "expected `<segment_id> <label> <raw> [<calibrated>]`",
                ));
            }
            Ok(ScoreRecord {
                segment_id: toks[0].to_string(),
                label: textio::parse_label(path, line, toks[1])?,
                raw: textio::parse_f64(path, line, toks[2])?,
                calibrated: toks.get(3).map(|t| textio::parse_f64(path, line, t)).transpose()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fitted(scores: &[f64], labels: &[u8]) -> Vec<f64> {
        let m = pav_fit(scores, labels).unwrap();
        scores.iter().map(|&s| m.apply(s)).collect()
    }

    #[test]
    fn already_isotonic() {
        assert_eq!(fitted(&[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1]), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn violators_pool() {
        let m = pav_fit(&[0.1, 0.35, 0.4, 0.8], &[0, 1, 0, 1]).unwrap();
        assert_eq!(m.block_posteriors(), &[0.0, 0.5, 1.0]);
        assert_eq!(m.apply(0.36), 0.5);
        assert_eq!(m.apply(0.4), 0.5);
        assert_eq!(m.apply(-5.0), 0.0);
        assert_eq!(m.apply(5.0), 1.0);
    }

    #[test]
    fn ties_share_a_block() {
        let m = pav_fit(&[1.0, 1.0, 1.0, 2.0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(m.breakpoints(), &[1.0, 2.0]);
        assert!((m.apply(1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_and_length_mismatch_rejected() {
        assert!(matches!(pav_fit(&[1.0, 2.0], &[1, 1]), Err(Error::Data(_))));
        assert!(matches!(pav_fit(&[1.0, 2.0], &[0, 0]), Err(Error::Data(_))));
        assert!(matches!(pav_fit(&[1.0], &[0, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn llr_examples() {
        assert_eq!(posterior_to_llr(0.3, 0.3, 100), 0.0);
        assert!((posterior_to_llr(0.9, 0.5, 100) - 9f64.ln()).abs() < 1e-12);
        assert!((posterior_to_llr(0.9, 0.5, 3) - 9f64.ln()).abs() < 1e-12);
        // pure block of 50 at prior 0.5: 50.5 / 51 against 0.5 / 51, LLR = ln(101)
        let top = posterior_to_llr(1.0, 0.5, 50);
        assert!((top - 101f64.ln()).abs() < 1e-12);
        assert!((posterior_to_llr(0.0, 0.5, 50) + 101f64.ln()).abs() < 1e-12);
        // a single item cannot carry more than ln((1 + π) / π)
        assert!((posterior_to_llr(1.0, 0.25, 1) - 5f64.ln()).abs() < 1e-12);
        assert_eq!(posterior_to_llr(1.0, 0.5, 0), 0.0);
        assert_eq!(posterior_to_llr_exact(1.0, 0.5), f64::INFINITY);
        assert_eq!(posterior_to_llr_exact(0.0, 0.5), f64::NEG_INFINITY);
    }

    #[test]
    fn calibration_plot_examples() {
        let bins = calibration_plot(&[0.5; 4], &[1, 0, 1, 0], 0.02).unwrap();
        assert_eq!(bins.len(), 1);
        assert!((bins[0].center - 0.51).abs() < 1e-12);
        assert_eq!(bins[0].proportion, 0.5);
        assert_eq!(bins[0].count, 4);
        assert!(calibration_plot(&[0.5], &[1], 0.0).is_err());
        assert_eq!(unit_bins(0.02).unwrap(), 50);
        assert_eq!(unit_bin_index(1.0, 50, 0.02), 49);
    }

    #[test]
    fn calibrated_scores_track_the_diagonal() {
        // scores drawn uniformly, labels Bernoulli(score)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = scores.iter().map(|&s| u8::from(rng.random::<f64>() < s)).collect();
        for b in calibration_plot(&scores, &labels, 0.05).unwrap() {
            let sigma = (b.center * (1.0 - b.center) / b.count as f64).sqrt();
            assert!((b.proportion - b.center).abs() < 4.0 * sigma + 0.025 / 2.0, "{b:?}");
        }
    }

    #[test]
    fn pav_output_replots_on_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = scores.iter().map(|&s| u8::from(rng.random::<f64>() < s * s)).collect();
        let m = pav_fit(&scores, &labels).unwrap();
        let cal: Vec<f64> = scores.iter().map(|&s| m.apply(s)).collect();
        // a PAV block has posterior equal to its own label mean, so any bin fully covered
        // by blocks reproduces it; bins straddling a block edge mix at most two blocks
        for b in calibration_plot(&cal, &labels, 0.02).unwrap() {
            let members: Vec<f64> = cal
                .iter()
                .copied()
                .filter(|&c| unit_bin_index(c, 50, 0.02) == unit_bin_index(b.center, 50, 0.02))
                .collect();
            let mean_cal = members.iter().sum::<f64>() / members.len() as f64;
            assert!((b.proportion - mean_cal).abs() <= 1.0 / b.count as f64 + 1e-12, "{b:?}");
        }
    }

    #[test]
    fn map_and_score_files_round_trip() {
        let m = pav_fit(&[0.1, 0.35, 0.4, 0.8, 0.8], &[0, 1, 0, 1, 0]).unwrap();
        assert_eq!(parse_map(Path::new("m"), &map_to_text(&m)).unwrap(), m);
        let recs = vec![
            ScoreRecord {
                segment_id: "a".into(),
                label: 1,
                raw: 0.25,
                calibrated: Some(0.5),
            },
            ScoreRecord {
                segment_id: "b".into(),
                label: 0,
                raw: -1e-30,
                calibrated: None,
            },
        ];
        assert_eq!(parse_scores(Path::new("s"), &scores_to_text(&recs)).unwrap(), recs);
        assert!(parse_map(Path::new("m"), "veilvec-pav v1 prior=0.5\n2 0.5 1\n1 0.7 1\n").is_err());
        assert!(parse_map(Path::new("m"), "veilvec-pav v1 prior=0.5\n1 0.5 1\n2 0.7 0\n").is_err());
        let ok = parse_map(Path::new("m"), "veilvec-pav v1 prior=0.5\n1 0.25 4\n2 0.75 4\n").unwrap();
        assert_eq!(ok.n_items(), 8);
    }

    proptest! {
        #[test]
        fn fitted_map_is_monotone(
            data in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..60),
            probes in prop::collection::vec(-6.0f64..6.0, 2..30),
        ) {
            let (scores, labels): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let m = pav_fit(&scores, &labels).unwrap();
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            let out: Vec<f64> = probes.iter().map(|&p| m.apply(p)).collect();
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            // pooled means preserve the label total
            let total: f64 = scores.iter().map(|&s| m.apply(s)).sum();
            let ones = labels.iter().filter(|&&y| y == 1).count() as f64;
            prop_assert!((total - ones).abs() < 1e-9);
        }
    }
}
