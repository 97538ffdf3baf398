//! The external attribute classifier: a single sigmoid unit trained with
//! mini-batch gradient descent on binary cross-entropy.
//!
//! Its raw outputs are treated as uncalibrated scores; see [`crate::calibration`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::textio;

const CLF_MAGIC: &str = "veilvec-linclf v1";

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl LinearClassifier {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w·v + b`.
    pub fn logit(&self, vector: &[f64]) -> Result<f64> {
        Error::check_dim(self.dim(), vector.len())?;
        Ok(self.weights.iter().zip(vector).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    /// Raw attribute score `sigmoid(w·v + b)` in (0, 1).
    pub fn score(&self, vector: &[f64]) -> Result<f64> {
        self.logit(vector).map(sigmoid)
    }

    pub fn score_corpus(&self, corpus: &Corpus) -> Result<Vec<f64>> {
        corpus.items().iter().map(|e| self.score(&e.vector)).collect()
    }

    /// Mean binary cross-entropy (nats) over a corpus.
    pub fn loss(&self, corpus: &Corpus) -> Result<f64> {
        let mut total = 0.0;
        for e in corpus.items() {
            let z = self.logit(&e.vector)?;
            // -log sigmoid(z) for label 1, -log sigmoid(-z) for label 0
            let signed = if e.label == 1 { z } else { -z };
            total += softplus(-signed);
        }
        Ok(total / corpus.len() as f64)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Trains a classifier from zero initialisation. Mini-batch order is shuffled per epoch
/// from `cfg.seed`.
pub fn train(corpus: &Corpus, cfg: &ClassifierConfig) -> Result<LinearClassifier> {
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("classifier lr and batch_size must be positive".into()));
    }
    corpus.require_both_labels()?;
    let d = corpus.dim();
    let items = corpus.items();
    let mut clf = LinearClassifier::zeros(d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut grad_w = vec![0.0; d];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in batch {
                let e = &items[i];
                let err = clf.score(&e.vector)? - f64::from(e.label);
                for (g, v) in grad_w.iter_mut().zip(&e.vector) {
                    *g += err * v;
                }
                grad_b += err;
            }
            let step = cfg.lr / batch.len() as f64;
            for (w, g) in clf.weights.iter_mut().zip(&grad_w) {
                *w -= step * g;
            }
            clf.bias -= step * grad_b;
        }
        if !clf.bias.is_finite() || clf.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("classifier parameters diverged".into()));
        }
    }
    Ok(clf)
}

pub fn to_text(clf: &LinearClassifier) -> String {
    let mut out = String::new();
    writeln!(out, "{CLF_MAGIC}").unwrap();
    writeln!(out, "dim {}", clf.dim()).unwrap();
    writeln!(out, "bias {}", textio::fmt_f64(clf.bias)).unwrap();
    writeln!(out, "weights").unwrap();
    for w in &clf.weights {
        writeln!(out, "{}", textio::fmt_f64(*w)).unwrap();
    }
    out
}

pub fn save(clf: &LinearClassifier, path: impl AsRef<Path>) -> Result<()> {
    textio::write_file(path.as_ref(), &to_text(clf))
}

pub fn load(path: impl AsRef<Path>) -> Result<LinearClassifier> {
    let path = path.as_ref();
    parse(path, &textio::read_to_string(path)?)
}

pub fn parse(path: &Path, text: &str) -> Result<LinearClassifier> {
    let file = textio::split_header(path, text)?;
    if !textio::header_fields(path, &file, CLF_MAGIC)?.is_empty() {
        return Err(Error::parse(path, file.header_line, "unexpected header fields"));
    }
    let mut body = file.body.into_iter();
    let mut field = |name: &str| -> Result<(usize, String)> {
        let (line, content) = body
            .next()
            .ok_or_else(|| Error::parse(path, 0, format!("missing `{name}` field")))?;
        let rest = content
            .strip_prefix(name)
            .filter(|r| r.is_empty() || r.starts_with(' '))
            .ok_or_else(|| Error::parse(path, line, format!("expected `{name}`")))?;
        Ok((line, rest.trim().to_string()))
    };
    let (line, dim) = field("dim")?;
    let dim = textio::parse_usize(path, line, &dim)?;
    let (line, bias) = field("bias")?;
    let bias = textio::parse_f64(path, line, &bias)?;
    field("weights")?;
    let weights = body
        .map(|(line, tok)| textio::parse_f64(path, line, tok))
        .collect::<Result<Vec<f64>>>()?;
    if weights.len() != dim {
        return Err(Error::parse(
            path,
            line,
            format!("expected {dim} weights, found {}", weights.len()),
        ));
    }
    Ok(LinearClassifier { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Embedding;

    fn toy() -> Corpus {
        let pts = [
            ([1.0, 0.2], 1),
            ([0.8, -0.3], 1),
            ([1.2, 0.5], 1),
            ([0.6, 0.1], 1),
            ([-1.0, 0.4], 0),
            ([-0.7, -0.2], 0),
            ([-1.3, 0.0], 0),
            ([-0.5, -0.6], 0),
        ];
        let items = pts
            .iter()
            .enumerate()
            .map(|(i, (v, y))| Embedding {
                segment_id: format!("t{i}"),
                speaker_id: format!("s{i}"),
                label: *y,
                posterior_soft: None,
                vector: v.to_vec(),
            })
            .collect();
        Corpus::new(2, items).unwrap()
    }

    #[test]
    fn zero_model_scores_half() {
        let clf = LinearClassifier::zeros(3);
        assert_eq!(clf.score(&[4.0, -1.0, 9.0]).unwrap(), 0.5);
        assert!(matches!(clf.score(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn score_monotone_in_logit() {
        let mut prev = 0.0;
        for i in -40..=40 {
            let s = sigmoid(f64::from(i) * 0.5);
            assert!(s > prev && s < 1.0 || (s == 1.0 && prev <= 1.0));
            prev = s;
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn score_bias_derivative_matches_finite_difference() {
        let clf = LinearClassifier {
            weights: vec![0.3, -1.2],
            bias: 0.4,
        };
        let v = [0.7, 0.1];
        let s = clf.score(&v).unwrap();
        let analytic = s * (1.0 - s);
        let h = 1e-6;
        let up = LinearClassifier {
            bias: clf.bias + h,
            ..clf.clone()
        }
        .score(&v)
        .unwrap();
        let dn = LinearClassifier {
            bias: clf.bias - h,
            ..clf.clone()
        }
        .score(&v)
        .unwrap();
        let numeric = (up - dn) / (2.0 * h);
        assert!(((analytic - numeric) / analytic).abs() < 1e-6);
    }

    #[test]
    fn scaling_preserves_order_along_a_direction() {
        let clf = LinearClassifier {
            weights: vec![0.5, -0.25],
            bias: 0.0,
        };
        let v = [1.0, 3.0];
        let scores: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|c| clf.score(&[v[0] * c, v[1] * c]).unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let c = toy();
        let cfg = ClassifierConfig {
            epochs: 200,
            lr: 0.5,
            batch_size: 4,
            seed: 1,
        };
        let clf = train(&c, &cfg).unwrap();
        for e in c.items() {
            let predicted = u8::from(clf.score(&e.vector).unwrap() > 0.5);
            assert_eq!(predicted, e.label);
        }
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let c = toy();
        let mut prev = f64::INFINITY;
        for epochs in 0..30 {
            let cfg = ClassifierConfig {
                epochs,
                lr: 0.1,
                batch_size: 64,
                seed: 0,
            };
            let loss = train(&c, &cfg).unwrap().loss(&c).unwrap();
            assert!(loss <= prev + 1e-15, "epoch {epochs}: {loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn single_class_rejected() {
        let c = toy();
        let ones: Vec<_> = c.into_items().into_iter().filter(|e| e.label == 1).collect();
        let c = Corpus::new(2, ones).unwrap();
        assert!(matches!(train(&c, &ClassifierConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let c = toy();
        let cfg = ClassifierConfig {
            epochs: 5,
            lr: 0.3,
            batch_size: 3,
            seed: 9,
        };
        let a = train(&c, &cfg).unwrap();
        assert_eq!(a, train(&c, &cfg).unwrap());
        let back = parse(Path::new("m"), &to_text(&a)).unwrap();
        assert_eq!(a, back);
        assert!(parse(Path::new("m"), "veilvec-linclf v1\ndim 3\nbias 0\nweights\n1\n2\n").is_err());
    }
}
