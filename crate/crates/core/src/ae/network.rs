//! Forward and backward passes. Batches are matrices with one sample per column.

use nalgebra::{DMatrix, DVector};

use super::model::Params;
use super::BN_EPS;
use crate::classifier::sigmoid;
use crate::error::{Error, Result};

/// Probability clamp applied before taking logarithms in both objectives.
pub const PROB_CLAMP: f64 = 1e-7;

/// Batchnorm mode.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Normalise with the batch's own mean and biased variance.
    Train,
    /// Normalise with stored running statistics.
    Infer {
        mean: &'a DVector<f64>,
        var: &'a DVector<f64>,
    },
}

pub struct EncoderPass {
    pub z: DMatrix<f64>,
    /// Pre-activation `W_E x + b_E`.
    pub pre: DMatrix<f64>,
    /// Normalised activations before scale and shift.
    pub normed: DMatrix<f64>,
    pub inv_std: DVector<f64>,
    /// Batch statistics (train mode), for updating the running estimates.
    pub batch_mean: DVector<f64>,
    pub batch_var: DVector<f64>,
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut c in m.column_iter_mut() {
        c += b;
    }
}

/// `z = BN(ReLU(W_E x + b_E))`.
pub fn encode(p: &Params, x: &DMatrix<f64>, mode: Mode<'_>) -> EncoderPass {
    let mut pre = &p.enc_w * x;
    add_bias(&mut pre, &p.enc_b);
    let act = pre.map(|v| v.max(0.0));
    let m = act.ncols() as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mean = act.column_mean();
            let mut var = DVector::zeros(act.nrows());
            for c in act.column_iter() {
                var += (c - &mean).map(|v| v * v);
            }
            (mean, var / m)
        }
        Mode::Infer { mean, var } => (mean.clone(), var.clone()),
    };
    let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut normed = act;
    for mut c in normed.column_iter_mut() {
        c -= &mean;
        c.component_mul_assign(&inv_std);
    }
    let mut z = normed.clone();
    for mut c in z.column_iter_mut() {
        c.component_mul_assign(&p.bn_gamma);
        c += &p.bn_beta;
    }
    EncoderPass {
        z,
        pre,
        normed,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    }
}

pub struct DecoderPass {
    /// `[z; w]`
    pub input: DMatrix<f64>,
    pub tanh: DMatrix<f64>,
    pub norms: Vec<f64>,
    pub x_hat: DMatrix<f64>,
}

/// `x̂ = length_normalize(tanh(W_D [z; w] + b_D))`.
pub fn decode(p: &Params, z: &DMatrix<f64>, w: &[f64]) -> Result<DecoderPass> {
    let zd = z.nrows();
    let mut input = DMatrix::zeros(zd + 1, z.ncols());
    input.rows_mut(0, zd).copy_from(z);
    for (j, &wj) in w.iter().enumerate() {
        input[(zd, j)] = wj;
    }
    let mut u = &p.dec_w * &input;
    add_bias(&mut u, &p.dec_b);
    let tanh = u.map(f64::tanh);
    let mut norms = Vec::with_capacity(tanh.ncols());
    let mut x_hat = tanh.clone();
    for mut c in x_hat.column_iter_mut() {
        let n = c.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numerical(format!(
                "decoder produced a vector of norm {n} before length normalisation"
            )));
        }
        c /= n;
        norms.push(n);
    }
    Ok(DecoderPass {
        input,
        tanh,
        norms,
        x_hat,
    })
}

pub struct AdversaryPass {
    pub hidden_pre: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    /// Probability of label 1 per sample.
    pub prob: Vec<f64>,
}

/// `ŷ₁ = sigmoid(W₂ ReLU(W₁ z + b₁) + b₂)`.
pub fn adversary(p: &Params, z: &DMatrix<f64>) -> AdversaryPass {
    let mut hidden_pre = &p.adv_w1 * z;
    add_bias(&mut hidden_pre, &p.adv_b1);
    let hidden = hidden_pre.map(|v| v.max(0.0));
    let logits = &p.adv_w2 * &hidden;
    let prob = logits.iter().map(|s| sigmoid(s + p.adv_b2[0])).collect();
    AdversaryPass {
        hidden_pre,
        hidden,
        prob,
    }
}

/// Probability the adversary assigns to the true label.
fn true_class_prob(prob1: f64, label: u8) -> f64 {
    if label == 1 {
        prob1
    } else {
        1.0 - prob1
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

// The clamp bounds the reported loss only. Gradients are those of the unclamped
// loss in logit space, so a saturated player still receives a signal; a zero
// gradient there lets either player lock the other out for good.

/// Adversary objective `-(1/m) Σ log p_true` and its gradient w.r.t. the logits.
pub fn adversary_objective(prob1: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let m = prob1.len() as f64;
    let mut loss = 0.0;
    let grad = prob1
        .iter()
        .zip(labels)
        .map(|(&q, &y)| {
            loss -= clamp_prob(true_class_prob(q, y)).ln();
            (q - f64::from(y)) / m
        })
        .collect();
    (loss / m, grad)
}

/// The fooling part of the autoencoder objective, `-(1/m) Σ log(1 - p_true)`,
/// and its gradient w.r.t. the logits.
pub fn fooling_objective(prob1: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let m = prob1.len() as f64;
    let mut loss = 0.0;
    let grad = prob1
        .iter()
        .zip(labels)
        .map(|(&q, &y)| {
            loss -= (1.0 - clamp_prob(true_class_prob(q, y))).ln();
            (q - f64::from(1 - y)) / m
        })
        .collect();
    (loss / m, grad)
}

/// `1 − cos(x̂, x)`.
pub fn reconstruction_error(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    Error::check_dim(x.len(), x_hat.len())?;
    let nh = x_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nh > 0.0 && nx > 0.0) {
        return Err(Error::Numerical("reconstruction error of a zero vector".into()));
    }
    let dot: f64 = x_hat.iter().zip(x).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nh * nx))
}

/// Mean reconstruction error over columns and its gradient w.r.t. `x_hat`.
pub fn reconstruction_objective(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let m = x.ncols() as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let xh = x_hat.column(j);
        let xo = x.column(j);
        let (nh, nx) = (xh.norm(), xo.norm());
        if !(nh > 0.0 && nx > 0.0) {
            return Err(Error::Numerical("reconstruction error of a zero vector".into()));
        }
        let cos = xh.dot(&xo) / (nh * nx);
        loss += 1.0 - cos;
        let g = -(xo / (nh * nx) - xh * (cos / (nh * nh))) / m;
        grad.set_column(j, &g);
    }
    Ok((loss / m, grad))
}

/// Backpropagates logit gradients through the adversary. Returns the gradient
/// w.r.t. `z` and accumulates parameter gradients into `grads`.
pub fn adversary_backward(
    p: &Params,
    z: &DMatrix<f64>,
    pass: &AdversaryPass,
    dlogit: &[f64],
    grads: &mut Params,
) -> DMatrix<f64> {
    let ds = DMatrix::from_row_slice(1, dlogit.len(), dlogit);
    grads.adv_w2 += &ds * pass.hidden.transpose();
    grads.adv_b2[0] += dlogit.iter().sum::<f64>();
    let mut dh = p.adv_w2.transpose() * &ds;
    dh.zip_apply(&pass.hidden_pre, |g, pre| {
        if pre <= 0.0 {
            *g = 0.0
        }
    });
    grads.adv_w1 += &dh * z.transpose();
    grads.adv_b1 += dh.column_sum();
    p.adv_w1.transpose() * dh
}

/// Backpropagates `dL/dx̂` through length normalisation, tanh and the decoder layer.
/// Returns the gradient w.r.t. `z` (the condition row is dropped).
pub fn decoder_backward(p: &Params, pass: &DecoderPass, dx_hat: &DMatrix<f64>, grads: &mut Params) -> DMatrix<f64> {
    let mut du = DMatrix::zeros(dx_hat.nrows(), dx_hat.ncols());
    for j in 0..dx_hat.ncols() {
        let g = dx_hat.column(j);
        let xh = pass.x_hat.column(j);
        let dt = (g - xh * g.dot(&xh)) / pass.norms[j];
        let t = pass.tanh.column(j);
        du.set_column(j, &dt.zip_map(&t, |a, t| a * (1.0 - t * t)));
    }
    grads.dec_w += &du * pass.input.transpose();
    grads.dec_b += du.column_sum();
    let d_input = p.dec_w.transpose() * du;
    let zd = d_input.nrows() - 1;
    d_input.rows(0, zd).into_owned()
}

/// Backpropagates `dL/dz` through train-mode batchnorm, ReLU and the encoder layer.
pub fn encoder_backward(p: &Params, x: &DMatrix<f64>, pass: &EncoderPass, dz: &DMatrix<f64>, grads: &mut Params) {
    let m = dz.ncols() as f64;
    let mut dnormed = dz.clone();
    for mut c in dnormed.column_iter_mut() {
        c.component_mul_assign(&p.bn_gamma);
    }
    grads.bn_beta += dz.column_sum();
    grads.bn_gamma += dz.component_mul(&pass.normed).column_sum();

    let sum_dn = dnormed.column_sum();
    let sum_dn_n = dnormed.component_mul(&pass.normed).column_sum();
    let mut dpre = DMatrix::zeros(dz.nrows(), dz.ncols());
    for j in 0..dz.ncols() {
        for i in 0..dz.nrows() {
            let da = pass.inv_std[i] / m * (m * dnormed[(i, j)] - sum_dn[i] - pass.normed[(i, j)] * sum_dn_n[i]);
            dpre[(i, j)] = if pass.pre[(i, j)] > 0.0 { da } else { 0.0 };
        }
    }
    grads.enc_w += &dpre * x.transpose();
    grads.enc_b += dpre.column_sum();
}
