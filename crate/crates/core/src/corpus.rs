//! Embedding corpora: the data model, a synthetic generator and the text file format.
//!
//! A corpus file looks like
//!
//! ```text
//! veilvec-corpus v1 dim=3
//! spk0000-seg000 spk0000 0 1.0e0 -2.5e-1 3.0e0
//! ```
//!
//! one segment per line: segment id, speaker id, binary label, then `dim` values.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio;

const CORPUS_MAGIC: &str = "veilvec-corpus v1";

/// One speech segment's embedding with its speaker and binary attribute label
/// (0 = male, 1 = female by convention).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub segment_id: String,
    pub speaker_id: String,
    pub label: u8,
    /// Calibrated attribute posterior, attached before autoencoder training.
    pub posterior_soft: Option<f64>,
    pub vector: Vec<f64>,
}

/// A set of embeddings sharing one dimension, with unique segment ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dim: usize,
    items: Vec<Embedding>,
}

impl Corpus {
    /// Builds a corpus, checking dimensions, labels, posteriors and id uniqueness.
    pub fn new(dim: usize, items: Vec<Embedding>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("corpus dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            Error::check_dim(dim, item.vector.len())?;
            if item.label > 1 {
                return Err(Error::Data(format!(
                    "segment {}: label must be 0 or 1",
                    item.segment_id
                )));
            }
            if let Some(p) = item.posterior_soft {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Data(format!(
                        "segment {}: posterior {p} outside [0, 1]",
                        item.segment_id
                    )));
                }
            }
            if !seen.insert(item.segment_id.as_str()) {
                return Err(Error::Data(format!("duplicate segment id {}", item.segment_id)));
            }
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[Embedding] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Embedding> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|e| e.label).collect()
    }

    /// Speaker ids in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.items
            .iter()
            .map(|e| e.speaker_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    /// Number of items carrying each label, `[count_0, count_1]`.
    pub fn label_counts(&self) -> [usize; 2] {
        let ones = self.items.iter().filter(|e| e.label == 1).count();
        [self.items.len() - ones, ones]
    }

    /// Fails unless both label values occur.
    pub fn require_both_labels(&self) -> Result<()> {
        let [zeros, ones] = self.label_counts();
        if zeros == 0 || ones == 0 {
            return Err(Error::Data(format!(
                "need both labels present, got {zeros} of label 0 and {ones} of label 1"
            )));
        }
        Ok(())
    }

    /// Returns a copy with every vector replaced by `f(vector)`.
    pub fn map_vectors<F>(&self, mut f: F) -> Result<Corpus>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut items = Vec::with_capacity(self.items.len());
        let mut dim = None;
        for item in &self.items {
            let vector = f(&item.vector)?;
            let d = *dim.get_or_insert(vector.len());
            Error::check_dim(d, vector.len())?;
            items.push(Embedding { vector, ..item.clone() });
        }
        Corpus::new(dim.unwrap_or(self.dim), items)
    }

    /// Index from segment id to position.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, e)| (e.segment_id.as_str(), i))
            .collect()
    }
}

/// Parameters of the synthetic embedding generator.
///
/// Speaker offsets are Gaussian inside a random `speaker_rank`-dimensional
/// subspace, scaled so that each coordinate has standard deviation close to
/// `speaker_spread`. Segment (session) noise lives in the same subspace with
/// per-coordinate spread `within_spread`, plus spherical noise of spread
/// `residual_spread`. With `speaker_rank = dim` both levels are spherical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub segments_per_speaker: usize,
    pub dim: usize,
    /// Distance between the two class means along the attribute direction.
    pub attribute_shift: f64,
    pub speaker_spread: f64,
    pub within_spread: f64,
    pub speaker_rank: usize,
    pub residual_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            segments_per_speaker: 40,
            dim: 512,
            attribute_shift: 2.0,
            speaker_spread: 0.06,
            within_spread: 0.06,
            speaker_rank: 32,
            residual_spread: 0.005,
            seed: 2020,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers < 2 {
            return fail("n_speakers must be at least 2");
        }
        if self.segments_per_speaker < 2 {
            return fail("segments_per_speaker must be at least 2");
        }
        if self.dim < 2 {
            return fail("dim must be at least 2");
        }
        if !(self.attribute_shift >= 0.0 && self.attribute_shift.is_finite()) {
            return fail("attribute_shift must be finite and non-negative");
        }
        if !(self.speaker_spread > 0.0 && self.speaker_spread.is_finite()) {
            return fail("speaker_spread must be positive");
        }
        if !(self.within_spread > 0.0 && self.within_spread.is_finite()) {
            return fail("within_spread must be positive");
        }
        if self.speaker_rank == 0 || self.speaker_rank > self.dim {
            return fail("speaker_rank must lie in [1, dim]");
        }
        if !(self.residual_spread >= 0.0 && self.residual_spread.is_finite()) {
            return fail("residual_spread must be finite and non-negative");
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws Gaussian vectors in a random `rank`-dimensional subspace of R^d whose
/// coordinates have standard deviation close to the requested spread.
struct Subspace {
    basis: Option<DMatrix<f64>>,
    gain: f64,
}

impl Subspace {
    fn new(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> Self {
        if rank == d {
            return Self { basis: None, gain: 1.0 };
        }
        let raw = DMatrix::from_vec(d, rank, gaussian_vec(rng, d * rank));
        Self {
            basis: Some(raw.qr().q()),
            gain: (d as f64 / rank as f64).sqrt(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, d: usize, spread: f64) -> DVector<f64> {
        let scale = spread * self.gain;
        match &self.basis {
            None => DVector::from_vec(gaussian_vec(rng, d)) * scale,
            Some(b) => b * DVector::from_vec(gaussian_vec(rng, b.ncols())) * scale,
        }
    }
}

/// Generates a synthetic corpus. Speakers alternate between label 0 and 1.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let d = cfg.dim;
    let r = cfg.speaker_rank;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let global_mean = gaussian_vec(&mut rng, d);
    let mut direction = gaussian_vec(&mut rng, d);
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|x| *x /= norm);

    let subspace = Subspace::new(&mut rng, d, r);

    let mut items = Vec::with_capacity(cfg.n_speakers * cfg.segments_per_speaker);
    for s in 0..cfg.n_speakers {
        let label = (s % 2) as u8;
        let offset = subspace.sample(&mut rng, d, cfg.speaker_spread);
        let mean: Vec<f64> = (0..d)
            .map(|j| global_mean[j] + f64::from(label) * cfg.attribute_shift * direction[j] + offset[j])
            .collect();
        let speaker_id = format!("spk{s:04}");
        for g in 0..cfg.segments_per_speaker {
            let session = subspace.sample(&mut rng, d, cfg.within_spread);
            let vector = mean
                .iter()
                .zip(session.iter())
                .map(|(m, s)| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + s + cfg.residual_spread * noise
                })
                .collect::<Vec<f64>>();
            items.push(Embedding {
                segment_id: format!("{speaker_id}-seg{g:03}"),
                speaker_id: speaker_id.clone(),
                label,
                posterior_soft: None,
                vector,
            });
        }
    }
    Corpus::new(d, items)
}

/// Serialises a corpus to the text format (posteriors are not stored).
pub fn to_text(corpus: &Corpus) -> String {
    let mut out = String::new();
    writeln!(out, "{CORPUS_MAGIC} dim={}", corpus.dim).unwrap();
    for e in &corpus.items {
        write!(out, "{} {} {}", e.segment_id, e.speaker_id, e.label).unwrap();
        for v in &e.vector {
            out.push(' ');
            out.push_str(&textio::fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn save(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    textio::write_file(path.as_ref(), &to_text(corpus))
}

pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = textio::read_to_string(path)?;
    parse(path, &text)
}

/// Parses corpus text; `path` is only used in error messages.
pub fn parse(path: &Path, text: &str) -> Result<Corpus> {
    let file = textio::split_header(path, text)?;
    let fields = textio::header_fields(path, &file, CORPUS_MAGIC)?;
    let dim = match fields.as_slice() {
        [("dim", v)] => textio::parse_usize(path, file.header_line, v)?,
        _ => {
            return Err(Error::parse(
                path,
                file.header_line,
                "header must carry exactly `dim=<d>`",
            ))
        }
    };
    if dim == 0 {
        return Err(Error::parse(path, file.header_line, "dim must be positive"));
    }
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(file.body.len());
    for (line, content) in file.body {
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != dim + 3 {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} vector values, found {}", dim, toks.len().saturating_sub(3)),
            ));
        }
        if !seen.insert(toks[0]) {
            return Err(Error::parse(path, line, format!("duplicate segment id `{}`", toks[0])));
        }
        let label = textio::parse_label(path, line, toks[2])?;
        let vector = toks[3..]
            .iter()
            .map(|t| textio::parse_f64(path, line, t))
            .collect::<Result<Vec<f64>>>()?;
        items.push(Embedding {
            segment_id: toks[0].to_string(),
            speaker_id: toks[1].to_string(),
            label,
            posterior_soft: None,
            vector,
        });
    }
    Corpus::new(dim, items)
}

/// Partitions a corpus into `fractions.len()` disjoint parts.
///
/// With `by_speaker` the shuffled unit is the speaker, so no speaker spans two
/// parts; otherwise individual segments are shuffled. Items keep their original
/// relative order inside each part.
pub fn split(corpus: &Corpus, fractions: &[f64], seed: u64, by_speaker: bool) -> Result<Vec<Corpus>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {total}")));
    }

    let units: Vec<&str> = if by_speaker {
        corpus.speakers()
    } else {
        corpus.items.iter().map(|e| e.segment_id.as_str()).collect()
    };
    let parts = fractions.len();
    if units.len() < parts {
        return Err(Error::Data(format!(
            "cannot split {} {} into {parts} parts",
            units.len(),
            if by_speaker { "speakers" } else { "segments" }
        )));
    }

    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = units.len();
    let mut bounds = Vec::with_capacity(parts);
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let raw = if i + 1 == parts {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        let b = raw.max(prev + 1).min(n - (parts - 1 - i));
        bounds.push(b);
        prev = b;
    }

    let mut assignment: HashMap<&str, usize> = HashMap::with_capacity(n);
    let mut start = 0;
    for (part, &end) in bounds.iter().enumerate() {
        for &u in &order[start..end] {
            assignment.insert(units[u], part);
        }
        start = end;
    }

    let mut out: Vec<Vec<Embedding>> = vec![Vec::new(); parts];
    for e in &corpus.items {
        let key = if by_speaker { &e.speaker_id } else { &e.segment_id };
        out[assignment[key.as_str()]].push(e.clone());
    }
    out.into_iter().map(|items| Corpus::new(corpus.dim, items)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_speakers: 10,
            segments_per_speaker: 4,
            dim: 6,
            speaker_rank: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(to_text(&a), to_text(&b));
        let c = generate(&SynthConfig { seed: 7, ..small_cfg() }).unwrap();
        assert_ne!(to_text(&a), to_text(&c));
    }

    #[test]
    fn generate_shape_and_balance() {
        let cfg = SynthConfig {
            n_speakers: 7,
            ..small_cfg()
        };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.len(), 28);
        assert_eq!(c.speakers().len(), 7);
        let [z, o] = c.label_counts();
        assert!(z.abs_diff(o) <= (cfg.n_speakers % 2) * cfg.segments_per_speaker);
        for spk in c.speakers() {
            let labels: HashSet<u8> = c
                .items()
                .iter()
                .filter(|e| e.speaker_id == spk)
                .map(|e| e.label)
                .collect();
            assert_eq!(labels.len(), 1);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            SynthConfig {
                n_speakers: 1,
                ..small_cfg()
            },
            SynthConfig {
                segments_per_speaker: 1,
                ..small_cfg()
            },
            SynthConfig {
                dim: 1,
                speaker_rank: 1,
                ..small_cfg()
            },
            SynthConfig {
                residual_spread: -1.0,
                ..small_cfg()
            },
            SynthConfig {
                within_spread: 0.0,
                ..small_cfg()
            },
            SynthConfig {
                speaker_rank: 7,
                ..small_cfg()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let c = generate(&small_cfg()).unwrap();
        let back = parse(Path::new("mem"), &to_text(&c)).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn wrong_row_length_names_line() {
        let text = "veilvec-corpus v1 dim=2\na s 0 1 2\nb s 1 1 2 3\n";
        match parse(Path::new("x.txt"), text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_and_bad_header_rejected() {
        let dup = "veilvec-corpus v1 dim=1\na s 0 1\na s 0 2\n";
        assert!(matches!(parse(Path::new("x"), dup), Err(Error::Parse { line: 3, .. })));
        let bad = "veilvec-corpus v2 dim=1\n";
        assert!(matches!(parse(Path::new("x"), bad), Err(Error::Parse { line: 1, .. })));
        let label = "veilvec-corpus v1 dim=1\na s 2 1\n";
        assert!(matches!(
            parse(Path::new("x"), label),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_body_is_empty_corpus() {
        let c = parse(Path::new("x"), "veilvec-corpus v1 dim=4\n").unwrap();
        assert!(c.is_empty());
        assert_eq!(c.dim(), 4);
    }

    #[test]
    fn split_identity_and_speaker_halves() {
        let c = generate(&small_cfg()).unwrap();
        let whole = split(&c, &[1.0], 3, true).unwrap();
        assert_eq!(whole, vec![c.clone()]);

        let halves = split(&c, &[0.5, 0.5], 3, true).unwrap();
        let a: HashSet<&str> = halves[0].speakers().into_iter().collect();
        let b: HashSet<&str> = halves[1].speakers().into_iter().collect();
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        assert!(a.is_disjoint(&b));
        assert_eq!(halves, split(&c, &[0.5, 0.5], 3, true).unwrap());
    }

    #[test]
    fn split_errors() {
        let c = generate(&SynthConfig {
            n_speakers: 2,
            ..small_cfg()
        })
        .unwrap();
        assert!(matches!(split(&c, &[0.3, 0.3, 0.4], 0, true), Err(Error::Data(_))));
        assert!(matches!(split(&c, &[0.5, 0.6], 0, true), Err(Error::Config(_))));
        assert!(matches!(split(&c, &[1.5, -0.5], 0, true), Err(Error::Config(_))));
        assert_eq!(split(&c, &[0.3, 0.3, 0.4], 0, false).unwrap().len(), 3);
    }
}
