//! Standardisation and length normalisation.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Floor applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl StandardizerStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardises and then length-normalises one vector.
    pub fn preprocess(&self, vector: &[f64]) -> Result<Vec<f64>> {
        length_normalize(&standardize(self, vector)?)
    }

    /// Applies [`preprocess`](Self::preprocess) to every vector of a corpus.
    pub fn preprocess_corpus(&self, corpus: &Corpus) -> Result<Corpus> {
        corpus.map_vectors(|v| self.preprocess(v))
    }
}

pub fn fit_standardizer(corpus: &Corpus) -> Result<StandardizerStats> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot fit standardiser on an empty corpus".into()));
    }
    let d = corpus.dim();
    let n = corpus.len() as f64;
    let mut mean = vec![0.0; d];
    for e in corpus.items() {
        for (m, v) in mean.iter_mut().zip(&e.vector) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for e in corpus.items() {
        for ((s, v), m) in var.iter_mut().zip(&e.vector).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let stddev = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok(StandardizerStats { mean, stddev })
}

pub fn standardize(stats: &StandardizerStats, vector: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(stats.dim(), vector.len())?;
    Ok(vector
        .iter()
        .zip(&stats.mean)
        .zip(&stats.stddev)
        .map(|((v, m), s)| (v - m) / s)
        .collect())
}

/// Scales a vector to unit Euclidean norm. A zero vector is an error.
pub fn length_normalize(vector: &[f64]) -> Result<Vec<f64>> {
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numerical(format!(
            "cannot length-normalise a vector of norm {norm}"
        )));
    }
    Ok(vector.iter().map(|x| x / norm).collect())
}
