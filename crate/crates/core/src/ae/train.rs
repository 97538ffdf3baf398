use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AeModel, Params, Player};
use super::network::{self, Mode};
use crate::calibration::ScoreSet;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics;
use crate::preprocess;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the current batch in the running batchnorm statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            batch_size: 256,
            epochs: 50,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A mini-batch of preprocessed vectors (one per column) with labels and decoder conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub labels: Vec<u8>,
    pub w: Vec<f64>,
}

impl Batch {
    /// Builds a batch from already preprocessed items; each must carry a soft posterior.
    pub fn from_items<'a>(dim: usize, items: impl IntoIterator<Item = &'a crate::corpus::Embedding>) -> Result<Self> {
        let items: Vec<_> = items.into_iter().collect();
        let mut x = DMatrix::zeros(dim, items.len());
        let mut labels = Vec::with_capacity(items.len());
        let mut w = Vec::with_capacity(items.len());
        for (j, e) in items.iter().enumerate() {
            Error::check_dim(dim, e.vector.len())?;
            x.set_column(j, &DVector::from_column_slice(&e.vector));
            labels.push(e.label);
            w.push(
                e.posterior_soft
                    .ok_or_else(|| Error::Data(format!("segment {} has no soft posterior", e.segment_id)))?,
            );
        }
        Ok(Self { x, labels, w })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Adversary cross-entropy on the true label, w.r.t. adversary parameters.
    Adversary,
    /// Reconstruction plus fooling term, w.r.t. encoder, batchnorm and decoder parameters.
    Autoencoder,
}

impl Objective {
    pub fn player(self) -> Player {
        match self {
            Objective::Adversary => Player::Adversary,
            Objective::Autoencoder => Player::EncoderDecoder,
        }
    }
}

fn check_batch(model: &AeModel, batch: &Batch) -> Result<()> {
    Error::check_dim(model.dim(), batch.x.nrows())?;
    if batch.len() < 2 || batch.w.len() != batch.len() || batch.x.ncols() != batch.len() {
        return Err(Error::Data("a training batch needs at least 2 consistent items".into()));
    }
    Ok(())
}

/// Adversary objective on a batch (train-mode batchnorm).
pub fn adversary_loss(model: &AeModel, batch: &Batch) -> Result<f64> {
    loss_and_grads(model, batch, Objective::Adversary).map(|(l, _)| l)
}

/// Autoencoder objective on a batch (train-mode batchnorm), decoder conditioned on `batch.w`.
pub fn autoencoder_loss(model: &AeModel, batch: &Batch) -> Result<f64> {
    loss_and_grads(model, batch, Objective::Autoencoder).map(|(l, _)| l)
}

/// Objective value and its gradient. Only the tensors of the objective's player are
/// non-zero in the returned gradient.
pub fn loss_and_grads(model: &AeModel, batch: &Batch, objective: Objective) -> Result<(f64, Params)> {
    check_batch(model, batch)?;
    let enc = network::encode(&model.params, &batch.x, Mode::Train);
    match objective {
        Objective::Adversary => Ok(adversary_grads(&model.params, batch, &enc)),
        Objective::Autoencoder => autoencoder_grads(&model.params, batch, &enc).map(|(l, _, g)| (l, g)),
    }
}

fn adversary_grads(p: &Params, batch: &Batch, enc: &network::EncoderPass) -> (f64, Params) {
    let mut grads = Params::zeros_like(p);
    let adv = network::adversary(p, &enc.z);
    let (loss, dlogit) = network::adversary_objective(&adv.prob, &batch.labels);
    network::adversary_backward(p, &enc.z, &adv, &dlogit, &mut grads);
    (loss, grads)
}

/// Returns (objective, reconstruction part, gradient).
fn autoencoder_grads(p: &Params, batch: &Batch, enc: &network::EncoderPass) -> Result<(f64, f64, Params)> {
    let mut grads = Params::zeros_like(p);
    let dec = network::decode(p, &enc.z, &batch.w)?;
    let adv = network::adversary(p, &enc.z);
    let (rec, dx_hat) = network::reconstruction_objective(&dec.x_hat, &batch.x)?;
    let (fool, dlogit) = network::fooling_objective(&adv.prob, &batch.labels);
    let mut dz = network::decoder_backward(p, &dec, &dx_hat, &mut grads);
    dz += network::adversary_backward(p, &enc.z, &adv, &dlogit, &mut grads);
    network::encoder_backward(p, &batch.x, enc, &dz, &mut grads);
    for (_, player, t) in grads.tensors_mut() {
        if player == Player::Adversary {
            t.fill(0.0);
        }
    }
    Ok((rec + fool, rec, grads))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: Params,
}

impl OptState {
    pub fn new(model: &AeModel) -> Self {
        Self {
            velocity: Params::zeros_like(&model.params),
        }
    }
}

/// `v ← μ v + g; θ ← θ − η v` on the tensors owned by `player`.
fn momentum_update(params: &mut Params, grads: &Params, opt: &mut OptState, player: Player, cfg: &TrainConfig) {
    let vel = opt.velocity.tensors_mut();
    let grad = grads.tensors();
    for (((_, owner, theta), (_, _, v)), (_, _, g)) in params.tensors_mut().into_iter().zip(vel).zip(grad) {
        if owner != player {
            continue;
        }
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = cfg.momentum * *v + g;
            *t -= cfg.lr * *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Adversary objective before its update.
    pub adversary: f64,
    /// Autoencoder objective (against the updated adversary) before its update.
    pub autoencoder: f64,
    /// Mean reconstruction error part of the autoencoder objective.
    pub reconstruction: f64,
}

/// One adversarial step on a batch: first the adversary, then encoder and decoder
/// against the updated adversary. Also updates batchnorm running statistics.
pub fn train_step(model: &mut AeModel, batch: &Batch, opt: &mut OptState, cfg: &TrainConfig) -> Result<StepLosses> {
    check_batch(model, batch)?;

    // The encoder is not touched by the adversary update, so one pass serves both.
    let enc = network::encode(&model.params, &batch.x, Mode::Train);
    let m_bn = cfg.bn_momentum;
    model.bn_running_mean = &model.bn_running_mean * (1.0 - m_bn) + &enc.batch_mean * m_bn;
    model.bn_running_var = &model.bn_running_var * (1.0 - m_bn) + &enc.batch_var * m_bn;
    model.floor_running_var();

    let (adv_loss, adv_grads) = adversary_grads(&model.params, batch, &enc);
    if !adv_loss.is_finite() {
        return Err(Error::Numerical(format!("adversary loss is {adv_loss}")));
    }
    momentum_update(&mut model.params, &adv_grads, opt, Player::Adversary, cfg);

    let (ae_loss, rec, ae_grads) = autoencoder_grads(&model.params, batch, &enc)?;
    if !ae_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "autoencoder loss is {ae_loss} (reconstruction {rec})"
        )));
    }
    momentum_update(&mut model.params, &ae_grads, opt, Player::EncoderDecoder, cfg);
    if !model.params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(StepLosses {
        adversary: adv_loss,
        autoencoder: ae_loss,
        reconstruction: rec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub adversary_loss: f64,
    pub autoencoder_loss: f64,
    pub reconstruction: f64,
    /// Adversary AUC on held-out codes (inference mode), when a held-out set is given.
    pub heldout_adversary_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Trains a protection model.
///
/// Standardisation statistics are fit on `train` and stored in the model. Every
/// training item must carry a soft posterior, used as the decoder condition.
/// `heldout` (original space, posteriors not needed) is only used for logging.
pub fn train(train: &Corpus, heldout: Option<&Corpus>, cfg: &TrainConfig) -> Result<(AeModel, TrainLog)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Data("autoencoder training needs at least 2 items".into()));
    }
    if let Some(e) = train.items().iter().find(|e| e.posterior_soft.is_none()) {
        return Err(Error::Data(format!("segment {} has no soft posterior", e.segment_id)));
    }
    let stats = preprocess::fit_standardizer(train)?;
    let data = stats.preprocess_corpus(train)?;
    let heldout = heldout.map(|h| stats.preprocess_corpus(h)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AeModel::new(stats, &mut rng);
    model.config = Some(cfg.clone());
    let mut opt = OptState::new(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut adv, mut ae, mut rec, mut n) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = Batch::from_items(data.dim(), idx.iter().map(|&i| &data.items()[i]))?;
            let losses =
                train_step(&mut model, &batch, &mut opt, cfg).map_err(|e| e.context(format!("epoch {epoch}")))?;
            adv += losses.adversary;
            ae += losses.autoencoder;
            rec += losses.reconstruction;
            n += 1;
        }
        let n = n.max(1) as f64;
        let heldout_adversary_auc = heldout
            .as_ref()
            .map(|h| adversary_auc(&model, h))
            .transpose()?
            .flatten();
        log.epochs.push(EpochLog {
            epoch,
            adversary_loss: adv / n,
            autoencoder_loss: ae / n,
            reconstruction: rec / n,
            heldout_adversary_auc,
        });
    }
    Ok((model, log))
}

/// AUC of the adversary's label-1 probability on codes of preprocessed vectors.
/// `None` when the corpus lacks one of the labels.
pub fn adversary_auc(model: &AeModel, preprocessed: &Corpus) -> Result<Option<f64>> {
    if preprocessed.require_both_labels().is_err() {
        return Ok(None);
    }
    let mut x = DMatrix::zeros(model.dim(), preprocessed.len());
    for (j, e) in preprocessed.items().iter().enumerate() {
        x.set_column(j, &DVector::from_column_slice(&e.vector));
    }
    let z = model.encode_infer(&x)?;
    let prob = network::adversary(&model.params, &z).prob;
    let scores = ScoreSet::from_labeled(&prob, &preprocessed.labels())?;
    metrics::auc(&scores).map(Some)
}
