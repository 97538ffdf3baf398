use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::network::{self, Mode};
use super::train::TrainConfig;
use super::{ADV_HIDDEN, BN_EPS, Z_DIM};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::preprocess::StandardizerStats;
use crate::textio;

const AE_MAGIC: &str = "veilvec-ae v1";

/// Trainable tensors of the autoencoder and its adversary.
///
/// The same shape is reused for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `z_dim × d`
    pub enc_w: DMatrix<f64>,
    pub enc_b: DVector<f64>,
    pub bn_gamma: DVector<f64>,
    pub bn_beta: DVector<f64>,
    /// `d × (z_dim + 1)`; the last column multiplies the condition `w`.
    pub dec_w: DMatrix<f64>,
    pub dec_b: DVector<f64>,
    /// `hidden × z_dim`
    pub adv_w1: DMatrix<f64>,
    pub adv_b1: DVector<f64>,
    /// `1 × hidden`
    pub adv_w2: DMatrix<f64>,
    /// Length 1.
    pub adv_b2: DVector<f64>,
}

/// Which player a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    /// Encoder, batchnorm and decoder: updated on the autoencoder objective.
    EncoderDecoder,
    /// The adversarial attribute classifier: updated on its own objective.
    Adversary,
}

impl Params {
    fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> DMatrix<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
    }

    /// Fan-in scaled uniform initialisation; batchnorm starts at the identity.
    pub fn init(dim: usize, z_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let col = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        Self {
            enc_w: Self::uniform(rng, z_dim, dim, dim),
            enc_b: col(Self::uniform(rng, z_dim, 1, dim)),
            bn_gamma: DVector::from_element(z_dim, 1.0),
            bn_beta: DVector::zeros(z_dim),
            dec_w: Self::uniform(rng, dim, z_dim + 1, z_dim + 1),
            dec_b: col(Self::uniform(rng, dim, 1, z_dim + 1)),
            adv_w1: Self::uniform(rng, hidden, z_dim, z_dim),
            adv_b1: col(Self::uniform(rng, hidden, 1, z_dim)),
            adv_w2: Self::uniform(rng, 1, hidden, hidden),
            adv_b2: col(Self::uniform(rng, 1, 1, hidden)),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        let m = |x: &DMatrix<f64>| DMatrix::zeros(x.nrows(), x.ncols());
        let v = |x: &DVector<f64>| DVector::zeros(x.len());
        Self {
            enc_w: m(&other.enc_w),
            enc_b: v(&other.enc_b),
            bn_gamma: v(&other.bn_gamma),
            bn_beta: v(&other.bn_beta),
            dec_w: m(&other.dec_w),
            dec_b: v(&other.dec_b),
            adv_w1: m(&other.adv_w1),
            adv_b1: v(&other.adv_b1),
            adv_w2: m(&other.adv_w2),
            adv_b2: v(&other.adv_b2),
        }
    }

    pub fn dim(&self) -> usize {
        self.enc_w.ncols()
    }

    pub fn z_dim(&self) -> usize {
        self.enc_w.nrows()
    }

    /// Every tensor with its name and owner. Matrix storage is column-major.
    pub fn tensors(&self) -> [(&'static str, Player, &[f64]); 10] {
        use Player::*;
        [
            ("enc_weights", EncoderDecoder, self.enc_w.as_slice()),
            ("enc_bias", EncoderDecoder, self.enc_b.as_slice()),
            ("bn_gamma", EncoderDecoder, self.bn_gamma.as_slice()),
            ("bn_beta", EncoderDecoder, self.bn_beta.as_slice()),
            ("dec_weights", EncoderDecoder, self.dec_w.as_slice()),
            ("dec_bias", EncoderDecoder, self.dec_b.as_slice()),
            ("adv_w1", Adversary, self.adv_w1.as_slice()),
            ("adv_b1", Adversary, self.adv_b1.as_slice()),
            ("adv_w2", Adversary, self.adv_w2.as_slice()),
            ("adv_b2", Adversary, self.adv_b2.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, Player, &mut [f64]); 10] {
        use Player::*;
        [
            ("enc_weights", EncoderDecoder, self.enc_w.as_mut_slice()),
            ("enc_bias", EncoderDecoder, self.enc_b.as_mut_slice()),
            ("bn_gamma", EncoderDecoder, self.bn_gamma.as_mut_slice()),
            ("bn_beta", EncoderDecoder, self.bn_beta.as_mut_slice()),
            ("dec_weights", EncoderDecoder, self.dec_w.as_mut_slice()),
            ("dec_bias", EncoderDecoder, self.dec_b.as_mut_slice()),
            ("adv_w1", Adversary, self.adv_w1.as_mut_slice()),
            ("adv_b1", Adversary, self.adv_b1.as_mut_slice()),
            ("adv_w2", Adversary, self.adv_w2.as_mut_slice()),
            ("adv_b2", Adversary, self.adv_b2.as_mut_slice()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// A trained (or freshly initialised) protection model: network parameters,
/// batchnorm running statistics and the preprocessing statistics it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    pub params: Params,
    pub bn_running_mean: DVector<f64>,
    pub bn_running_var: DVector<f64>,
    pub stats: StandardizerStats,
    /// Echo of the configuration used for training, if any.
    pub config: Option<TrainConfig>,
}

impl AeModel {
    /// A randomly initialised model with the standard sizes (`z` of 128, adversary hidden layer of 64).
    pub fn new(stats: StandardizerStats, rng: &mut ChaCha8Rng) -> Self {
        Self::with_sizes(stats, Z_DIM, ADV_HIDDEN, rng)
    }

    pub fn with_sizes(stats: StandardizerStats, z_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let params = Params::init(stats.dim(), z_dim, hidden, rng);
        Self {
            params,
            bn_running_mean: DVector::zeros(z_dim),
            bn_running_var: DVector::from_element(z_dim, 1.0),
            stats,
            config: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn z_dim(&self) -> usize {
        self.params.z_dim()
    }

    /// Encodes preprocessed vectors (columns) with running batchnorm statistics.
    pub fn encode_infer(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Error::check_dim(self.dim(), x.nrows())?;
        let mode = Mode::Infer {
            mean: &self.bn_running_mean,
            var: &self.bn_running_var,
        };
        Ok(network::encode(&self.params, x, mode).z)
    }

    /// Encodes one preprocessed vector (inference mode).
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.encode_infer(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(z.as_slice().to_vec())
    }

    /// Decodes one code with condition `w` into a unit-norm vector.
    pub fn decode(&self, z: &[f64], w: f64) -> Result<Vec<f64>> {
        Error::check_dim(self.z_dim(), z.len())?;
        let z = DMatrix::from_column_slice(z.len(), 1, z);
        Ok(network::decode(&self.params, &z, &[w])?.x_hat.as_slice().to_vec())
    }

    /// Adversary's probability of label 1 for one code.
    pub fn adversary_predict(&self, z: &[f64]) -> Result<f64> {
        Error::check_dim(self.z_dim(), z.len())?;
        let z = DMatrix::from_column_slice(z.len(), 1, z);
        Ok(network::adversary(&self.params, &z).prob[0])
    }

    /// Protects one vector given in the original embedding space:
    /// preprocess, encode, then decode with condition `w`.
    pub fn protect(&self, raw: &[f64], w: f64) -> Result<Vec<f64>> {
        check_w(w)?;
        let x = self.stats.preprocess(raw)?;
        let z = self.encode(&x)?;
        self.decode(&z, w)
    }

    /// Protects every vector of a corpus (original space); `w` gives the condition per item.
    /// The output corpus lives in the model's normalised space.
    pub fn protect_corpus_with<F>(&self, corpus: &Corpus, mut w: F) -> Result<Corpus>
    where
        F: FnMut(&crate::corpus::Embedding) -> f64,
    {
        Error::check_dim(self.dim(), corpus.dim())?;
        let mut items = Vec::with_capacity(corpus.len());
        const CHUNK: usize = 512;
        for chunk in corpus.items().chunks(CHUNK) {
            let mut x = DMatrix::zeros(self.dim(), chunk.len());
            let mut ws = Vec::with_capacity(chunk.len());
            for (j, e) in chunk.iter().enumerate() {
                x.set_column(j, &DVector::from_vec(self.stats.preprocess(&e.vector)?));
                let wj = w(e);
                check_w(wj)?;
                ws.push(wj);
            }
            let z = self.encode_infer(&x)?;
            let out = network::decode(&self.params, &z, &ws)?.x_hat;
            for (j, e) in chunk.iter().enumerate() {
                items.push(crate::corpus::Embedding {
                    vector: out.column(j).iter().copied().collect(),
                    posterior_soft: None,
                    ..e.clone()
                });
            }
        }
        Corpus::new(self.dim(), items)
    }

    /// [`protect_corpus_with`](Self::protect_corpus_with) with one condition for all items.
    pub fn protect_corpus(&self, corpus: &Corpus, w: f64) -> Result<Corpus> {
        self.protect_corpus_with(corpus, |_| w)
    }

    /// Floors running variances at the batchnorm epsilon.
    pub(crate) fn floor_running_var(&mut self) {
        self.bn_running_var.iter_mut().for_each(|v| *v = v.max(BN_EPS));
    }
}

fn check_w(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("condition w = {w} outside [0, 1]")));
    }
    Ok(())
}

fn write_tensor(
    out: &mut String,
    name: &str,
    rows: usize,
    cols: usize,
    at: impl Fn(usize, usize) -> f64,
    is_vec: bool,
) {
    if is_vec {
        writeln!(out, "tensor {name} {rows}").unwrap();
    } else {
        writeln!(out, "tensor {name} {rows} {cols}").unwrap();
    }
    let (r_n, c_n) = if is_vec { (1, rows) } else { (rows, cols) };
    for r in 0..r_n {
        let line: Vec<String> = (0..c_n)
            .map(|c| textio::fmt_f64(if is_vec { at(c, 0) } else { at(r, c) }))
            .collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

/// Serialises a model: named tensors with shapes and row-major values, the
/// preprocessing statistics and the training configuration echo.
pub fn to_text(model: &AeModel) -> String {
    let mut out = String::new();
    writeln!(out, "{AE_MAGIC}").unwrap();
    if let Some(c) = &model.config {
        writeln!(
            out,
            "config lr={} momentum={} batch_size={} epochs={} seed={} bn_momentum={}",
            textio::fmt_f64(c.lr),
            textio::fmt_f64(c.momentum),
            c.batch_size,
            c.epochs,
            c.seed,
            textio::fmt_f64(c.bn_momentum)
        )
        .unwrap();
    }
    let p = &model.params;
    let mat = |out: &mut String, name: &str, m: &DMatrix<f64>| {
        write_tensor(out, name, m.nrows(), m.ncols(), |r, c| m[(r, c)], false)
    };
    let vec = |out: &mut String, name: &str, v: &[f64]| write_tensor(out, name, v.len(), 1, |r, _| v[r], true);
    mat(&mut out, "enc_weights", &p.enc_w);
    vec(&mut out, "enc_bias", p.enc_b.as_slice());
    vec(&mut out, "bn_gamma", p.bn_gamma.as_slice());
    vec(&mut out, "bn_beta", p.bn_beta.as_slice());
    vec(&mut out, "bn_running_mean", model.bn_running_mean.as_slice());
    vec(&mut out, "bn_running_var", model.bn_running_var.as_slice());
    mat(&mut out, "dec_weights", &p.dec_w);
    vec(&mut out, "dec_bias", p.dec_b.as_slice());
    mat(&mut out, "adv_w1", &p.adv_w1);
    vec(&mut out, "adv_b1", p.adv_b1.as_slice());
    mat(&mut out, "adv_w2", &p.adv_w2);
    vec(&mut out, "adv_b2", p.adv_b2.as_slice());
    vec(&mut out, "pre_mean", &model.stats.mean);
    vec(&mut out, "pre_std", &model.stats.stddev);
    out
}

pub fn save(model: &AeModel, path: impl AsRef<Path>) -> Result<()> {
    textio::write_file(path.as_ref(), &to_text(model))
}

pub fn load(path: impl AsRef<Path>) -> Result<AeModel> {
    let path = path.as_ref();
    parse(path, &textio::read_to_string(path)?)
}

struct RawTensor {
    line: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

pub fn parse(path: &Path, text: &str) -> Result<AeModel> {
    let file = textio::split_header(path, text)?;
    if !textio::header_fields(path, &file, AE_MAGIC)?.is_empty() {
        return Err(Error::parse(path, file.header_line, "unexpected header fields"));
    }
    let mut config = None;
    let mut tensors: std::collections::HashMap<String, RawTensor> = Default::default();
    let mut body = file.body.iter().peekable();
    while let Some(&(line, content)) = body.next() {
        let toks: Vec<&str> = content.split_whitespace().collect();
        match toks.first().copied() {
            Some("config") => config = Some(parse_config(path, line, &toks[1..])?),
            Some("tensor") => {
                let (name, shape) = match toks.as_slice() {
                    [_, name, rows] => (*name, (textio::parse_usize(path, line, rows)?, 1, true)),
                    [_, name, rows, cols] => (
                        *name,
                        (
                            textio::parse_usize(path, line, rows)?,
                            textio::parse_usize(path, line, cols)?,
                            false,
                        ),
                    ),
                    _ => return Err(Error::parse(path, line, "expected `tensor <name> <rows> [<cols>]`")),
                };
                let (rows, cols, is_vec) = shape;
                let n_lines = if is_vec { 1 } else { rows };
                let mut values = Vec::with_capacity(rows * cols);
                for _ in 0..n_lines {
                    let &(vline, vals) = body
                        .next()
                        .ok_or_else(|| Error::parse(path, line, format!("tensor {name} truncated")))?;
                    let row = vals
                        .split_whitespace()
                        .map(|t| textio::parse_f64(path, vline, t))
                        .collect::<Result<Vec<f64>>>()?;
                    let expected = if is_vec { rows } else { cols };
                    if row.len() != expected {
                        return Err(Error::parse(
                            path,
                            vline,
                            format!("tensor {name}: expected {expected} values, found {}", row.len()),
                        ));
                    }
                    values.extend(row);
                }
                if tensors
                    .insert(
                        name.to_string(),
                        RawTensor {
                            line,
                            rows,
                            cols,
                            values,
                        },
                    )
                    .is_some()
                {
                    return Err(Error::parse(path, line, format!("duplicate tensor {name}")));
                }
            }
            _ => return Err(Error::parse(path, line, "expected `config` or `tensor` section")),
        }
    }

    let mut take = |name: &str| -> Result<RawTensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::parse(path, file.header_line, format!("missing tensor {name}")))
    };
    let mut fetch = |name: &str, rows: Option<usize>, cols: usize| -> Result<DMatrix<f64>> {
        let t = take(name)?;
        if t.cols != cols || rows.is_some_and(|r| r != t.rows) {
            return Err(Error::parse(
                path,
                t.line,
                format!("tensor {name} has unexpected shape {}x{}", t.rows, t.cols),
            ));
        }
        Ok(DMatrix::from_row_slice(t.rows, t.cols, &t.values))
    };
    let col = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());

    let pre_mean = col(fetch("pre_mean", None, 1)?);
    let d = pre_mean.len();
    let pre_std = col(fetch("pre_std", Some(d), 1)?);
    let enc_w = fetch("enc_weights", None, d)?;
    let z = enc_w.nrows();
    let enc_b = col(fetch("enc_bias", Some(z), 1)?);
    let bn_gamma = col(fetch("bn_gamma", Some(z), 1)?);
    let bn_beta = col(fetch("bn_beta", Some(z), 1)?);
    let bn_running_mean = col(fetch("bn_running_mean", Some(z), 1)?);
    let bn_running_var = col(fetch("bn_running_var", Some(z), 1)?);
    let dec_w = fetch("dec_weights", Some(d), z + 1)?;
    let dec_b = col(fetch("dec_bias", Some(d), 1)?);
    let adv_w1 = fetch("adv_w1", None, z)?;
    let h = adv_w1.nrows();
    let adv_b1 = col(fetch("adv_b1", Some(h), 1)?);
    let adv_w2 = fetch("adv_w2", Some(1), h)?;
    let adv_b2 = col(fetch("adv_b2", Some(1), 1)?);
    if let Some(name) = tensors.keys().next() {
        return Err(Error::parse(path, tensors[name].line, format!("unknown tensor {name}")));
    }

    let model = AeModel {
        params: Params {
            enc_w,
            enc_b,
            bn_gamma,
            bn_beta,
            dec_w,
            dec_b,
            adv_w1,
            adv_b1,
            adv_w2,
            adv_b2,
        },
        bn_running_mean,
        bn_running_var,
        stats: StandardizerStats {
            mean: pre_mean.as_slice().to_vec(),
            stddev: pre_std.as_slice().to_vec(),
        },
        config,
    };
    if !model.params.is_finite() || model.bn_running_var.iter().any(|v| !(*v >= BN_EPS)) {
        return Err(Error::parse(
            path,
            file.header_line,
            "model has non-finite parameters or running variance below the floor",
        ));
    }
    Ok(model)
}

fn parse_config(path: &Path, line: usize, toks: &[&str]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for tok in toks {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(path, line, format!("malformed config field `{tok}`")))?;
        match k {
            "lr" => cfg.lr = textio::parse_f64(path, line, v)?,
            "momentum" => cfg.momentum = textio::parse_f64(path, line, v)?,
            "batch_size" => cfg.batch_size = textio::parse_usize(path, line, v)?,
            "epochs" => cfg.epochs = textio::parse_usize(path, line, v)?,
            "seed" => {
                cfg.seed = v
                    .parse()
                    .map_err(|_| Error::parse(path, line, format!("invalid seed `{v}`")))?
            }
            "bn_momentum" => cfg.bn_momentum = textio::parse_f64(path, line, v)?,
            _ => return Err(Error::parse(path, line, format!("unknown config field `{k}`"))),
        }
    }
    Ok(cfg)
}
