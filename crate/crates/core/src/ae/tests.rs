use std::path::Path;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::corpus::{Corpus, Embedding};
use crate::preprocess::StandardizerStats;

fn identity_stats(d: usize) -> StandardizerStats {
    StandardizerStats {
        mean: vec![0.0; d],
        stddev: vec![1.0; d],
    }
}

fn small_model(d: usize, seed: u64) -> AeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AeModel::with_sizes(identity_stats(d), 6, 5, &mut rng)
}

fn random_batch(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut x = DMatrix::from_fn(d, m, |_, _| StandardNormal.sample(rng));
    for mut c in x.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    let mut labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let w = (0..m).map(|_| rng.random::<f64>()).collect();
    Batch { x, labels, w }
}

#[test]
fn reconstruction_error_examples() {
    let x = [0.3, -1.0, 2.0];
    assert!(reconstruction_error(&x, &x).unwrap().abs() < 1e-15);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((reconstruction_error(&neg, &x).unwrap() - 2.0).abs() < 1e-15);
    assert!((reconstruction_error(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!(reconstruction_error(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(reconstruction_error(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn zero_encoder_weights_give_the_batchnorm_shift() {
    let mut m = small_model(4, 1);
    m.params.enc_w.fill(0.0);
    m.params.enc_b.fill(0.0);
    m.bn_running_mean = DVector::from_element(6, 0.2);
    m.bn_running_var = DVector::from_element(6, 0.5);
    m.params.bn_gamma = DVector::from_element(6, 1.5);
    m.params.bn_beta = DVector::from_element(6, -0.1);
    let z = m.encode(&[0.5, 0.5, 0.5, 0.5]).unwrap();
    let expect = 1.5 * (0.0 - 0.2) / (0.5 + BN_EPS).sqrt() - 0.1;
    assert!(z.iter().all(|v| (v - expect).abs() < 1e-12), "{z:?}");
}

#[test]
fn train_mode_batchnorm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = small_model(10, 2);
    // keep every unit active so the batch variance is not degenerate
    m.params.enc_b.fill(5.0);
    m.params.bn_gamma = DVector::from_fn(6, |i, _| 0.5 + i as f64);
    m.params.bn_beta = DVector::from_fn(6, |i, _| i as f64 - 2.0);
    let mut b = random_batch(10, 64, &mut rng);
    // large enough spread that eps is negligible against the batch variance
    b.x *= 50.0;
    let z = super::network::encode(&m.params, &b.x, super::network::Mode::Train).z;
    for i in 0..6 {
        let row = z.row(i);
        let mean = row.mean();
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!((mean - m.params.bn_beta[i]).abs() < 1e-6);
        assert!((sd - m.params.bn_gamma[i].abs()).abs() < 1e-4, "{sd}");
    }
}

#[test]
fn decoder_output_has_unit_norm_and_depends_on_w() {
    let m = small_model(7, 3);
    let z = vec![0.3, -0.2, 1.0, 0.0, 0.5, -1.5];
    let a = m.decode(&z, 0.0).unwrap();
    let b = m.decode(&z, 1.0).unwrap();
    for v in [&a, &b] {
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    assert_ne!(a, b);

    let mut flat = m.clone();
    flat.params.dec_w.column_mut(6).fill(0.0);
    assert_eq!(flat.decode(&z, 0.0).unwrap(), flat.decode(&z, 1.0).unwrap());

    let mut dead = m;
    dead.params.dec_w.fill(0.0);
    dead.params.dec_b.fill(0.0);
    assert!(matches!(dead.decode(&z, 0.5), Err(crate::Error::Numerical(_))));
}

#[test]
fn adversary_with_zero_weights_is_undecided() {
    let mut m = small_model(3, 4);
    m.params.adv_w2.fill(0.0);
    m.params.adv_b2.fill(0.0);
    assert_eq!(m.adversary_predict(&[1.0; 6]).unwrap(), 0.5);
    assert!(m.adversary_predict(&[1.0; 5]).is_err());
}

#[test]
fn losses_at_an_undecided_adversary() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = small_model(6, 5);
    m.params.adv_w2.fill(0.0);
    m.params.adv_b2.fill(0.0);
    let b = random_batch(6, 8, &mut rng);
    assert!((adversary_loss(&m, &b).unwrap() - 2f64.ln()).abs() < 1e-12);
    // the autoencoder objective is then reconstruction + ln 2
    let enc = super::network::encode(&m.params, &b.x, super::network::Mode::Train);
    let dec = super::network::decode(&m.params, &enc.z, &b.w).unwrap();
    let rec: f64 = (0..8)
        .map(|j| reconstruction_error(dec.x_hat.column(j).as_slice(), b.x.column(j).as_slice()).unwrap())
        .sum::<f64>()
        / 8.0;
    assert!((autoencoder_loss(&m, &b).unwrap() - rec - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn saturated_losses_hit_the_clamp() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = small_model(6, 6);
    let b = random_batch(6, 4, &mut rng);
    m.params.adv_w2.fill(0.0);
    // the adversary says label 1 with certainty; items with label 1 cost ≈ 0,
    // items with label 0 cost −ln(1e-7)
    m.params.adv_b2[0] = 100.0;
    let ones = b.labels.iter().filter(|&&y| y == 1).count() as f64;
    let expect = (4.0 - ones) * -(PROB_CLAMP.ln()) / 4.0;
    assert!((adversary_loss(&m, &b).unwrap() - expect).abs() < 1e-6);
}

#[test]
fn losses_match_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = small_model(5, 7);
    let b = random_batch(5, 6, &mut rng);
    let (mut adv, mut ae) = (0.0, 0.0);
    let enc = super::network::encode(&m.params, &b.x, super::network::Mode::Train);
    for j in 0..6 {
        let z: Vec<f64> = enc.z.column(j).iter().copied().collect();
        let q = m.adversary_predict(&z).unwrap();
        let p_true = if b.labels[j] == 1 { q } else { 1.0 - q };
        adv -= p_true.ln();
        let x_hat = m.decode(&z, b.w[j]).unwrap();
        ae += reconstruction_error(&x_hat, b.x.column(j).as_slice()).unwrap() - (1.0 - p_true).ln();
    }
    assert!((adversary_loss(&m, &b).unwrap() - adv / 6.0).abs() < 1e-12);
    assert!((autoencoder_loss(&m, &b).unwrap() - ae / 6.0).abs() < 1e-12);
}

#[test]
fn loss_and_grads_touches_only_its_player() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = small_model(5, 8);
    let b = random_batch(5, 4, &mut rng);
    for obj in [Objective::Adversary, Objective::Autoencoder] {
        let (_, g) = loss_and_grads(&m, &b, obj).unwrap();
        for (name, player, t) in g.tensors() {
            if player != obj.player() {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut m = small_model(5, 9);
    let before = m.params.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = OptState::new(&m);
    let b = random_batch(5, 8, &mut rng);
    let losses = train_step(&mut m, &b, &mut opt, &cfg).unwrap();
    assert!(losses.adversary.is_finite() && losses.autoencoder.is_finite());
    assert_eq!(m.params, before);
}

fn numeric_grad(m: &AeModel, b: &Batch, obj: Objective) -> Params {
    let h = 1e-5;
    let mut g = Params::zeros_like(&m.params);
    let mut probe = m.clone();
    let n_tensors = m.params.tensors().len();
    for t in 0..n_tensors {
        if m.params.tensors()[t].1 != obj.player() {
            continue;
        }
        for i in 0..m.params.tensors()[t].2.len() {
            let orig = probe.params.tensors()[t].2[i];
            probe.params.tensors_mut()[t].2[i] = orig + h;
            let up = loss_and_grads(&probe, b, obj).unwrap().0;
            probe.params.tensors_mut()[t].2[i] = orig - h;
            let down = loss_and_grads(&probe, b, obj).unwrap().0;
            probe.params.tensors_mut()[t].2[i] = orig;
            g.tensors_mut()[t].2[i] = (up - down) / (2.0 * h);
        }
    }
    g
}

#[test]
fn plain_step_follows_numeric_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m0 = small_model(5, 10);
    let b = random_batch(5, 4, &mut rng);
    let cfg = TrainConfig {
        lr: 1e-3,
        momentum: 0.0,
        ..TrainConfig::default()
    };

    let g_adv = numeric_grad(&m0, &b, Objective::Adversary);
    let mut m = m0.clone();
    let mut opt = OptState::new(&m);
    train_step(&mut m, &b, &mut opt, &cfg).unwrap();

    // adversary: θ − η g on the initial parameters
    for ((name, player, after), ((_, _, before), (_, _, g))) in m
        .params
        .tensors()
        .into_iter()
        .zip(m0.params.tensors().into_iter().zip(g_adv.tensors()))
    {
        if player == Player::Adversary {
            for ((a, b0), g) in after.iter().zip(before).zip(g) {
                assert!((a - (b0 - cfg.lr * g)).abs() < 1e-9, "{name}");
            }
        }
    }
    // encoder and decoder: gradient taken against the updated adversary
    let mut mid = m0.clone();
    for ((_, player, t), (_, _, src)) in mid.params.tensors_mut().into_iter().zip(m.params.tensors()) {
        if player == Player::Adversary {
            t.copy_from_slice(src);
        }
    }
    let g_ae = numeric_grad(&mid, &b, Objective::Autoencoder);
    for ((name, player, after), ((_, _, before), (_, _, g))) in m
        .params
        .tensors()
        .into_iter()
        .zip(m0.params.tensors().into_iter().zip(g_ae.tensors()))
    {
        if player == Player::EncoderDecoder {
            for ((a, b0), g) in after.iter().zip(before).zip(g) {
                assert!((a - (b0 - cfg.lr * g)).abs() < 1e-9, "{name}");
            }
        }
    }
}

#[test]
fn momentum_accumulates_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = small_model(5, 11);
    let b = random_batch(5, 4, &mut rng);
    let cfg = TrainConfig {
        lr: 1e-3,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let mut opt = OptState::new(&m);
    let (_, g1) = loss_and_grads(&m, &b, Objective::Adversary).unwrap();
    train_step(&mut m, &b, &mut opt, &cfg).unwrap();
    assert_eq!(opt.velocity.adv_w2, g1.adv_w2);
    let before = m.params.adv_b2[0];
    let (_, g2) = loss_and_grads(&m, &b, Objective::Adversary).unwrap();
    train_step(&mut m, &b, &mut opt, &cfg).unwrap();
    let v = 0.9 * g1.adv_b2[0] + g2.adv_b2[0];
    assert!((m.params.adv_b2[0] - (before - cfg.lr * v)).abs() < 1e-15);
}

#[test]
fn adversary_update_lowers_its_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = TrainConfig {
        lr: 1e-4,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let trials = 100;
    let mut wins = 0;
    for t in 0..trials {
        let mut m = AeModel::new(identity_stats(16), &mut ChaCha8Rng::seed_from_u64(100 + t));
        let b = random_batch(16, 32, &mut rng);
        let before = adversary_loss(&m, &b).unwrap();
        let mut opt = OptState::new(&m);
        train_step(&mut m, &b, &mut opt, &cfg).unwrap();
        // the encoder moved as well; measure the adversary loss on the codes the adversary was trained on
        let mut frozen = m.clone();
        let m0 = AeModel::new(identity_stats(16), &mut ChaCha8Rng::seed_from_u64(100 + t));
        for ((_, player, dst), (_, _, src)) in frozen.params.tensors_mut().into_iter().zip(m0.params.tensors()) {
            if player == Player::EncoderDecoder {
                dst.copy_from_slice(src);
            }
        }
        if adversary_loss(&frozen, &b).unwrap() < before {
            wins += 1;
        }
    }
    assert!(wins * 100 >= 95 * trials, "{wins}/{trials}");
}

fn toy_corpus(n: usize, d: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let vector = (0..d)
                .map(|j| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g + if j == 0 { 2.0 * f64::from(label) } else { 0.0 }
                })
                .collect();
            Embedding {
                segment_id: format!("s{i}"),
                speaker_id: format!("p{}", i / 4),
                label,
                posterior_soft: Some(if label == 1 { 0.9 } else { 0.1 }),
                vector,
            }
        })
        .collect();
    Corpus::new(d, items).unwrap()
}

#[test]
fn training_is_deterministic_and_logged() {
    let c = toy_corpus(40, 6, 13);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 3,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let (a, log_a) = train(&c, Some(&c), &cfg).unwrap();
    let (b, log_b) = train(&c, Some(&c), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.epochs.len(), 3);
    assert!(log_a.epochs.iter().all(|e| e.heldout_adversary_auc.is_some()));
    assert!(a.bn_running_var.iter().all(|&v| v >= BN_EPS));
    assert_eq!(a.config.as_ref(), Some(&cfg));
}

#[test]
fn training_needs_posteriors_and_valid_config() {
    let c = toy_corpus(10, 3, 14);
    let items = c
        .items()
        .iter()
        .cloned()
        .map(|e| Embedding {
            posterior_soft: None,
            ..e
        })
        .collect();
    let bare = Corpus::new(3, items).unwrap();
    assert!(matches!(
        train(&bare, None, &TrainConfig::default()),
        Err(crate::Error::Data(_))
    ));
    let bad = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&c, None, &bad), Err(crate::Error::Config(_))));
    let bad = TrainConfig {
        momentum: 1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&c, None, &bad), Err(crate::Error::Config(_))));
}

#[test]
fn model_file_round_trips() {
    let c = toy_corpus(20, 4, 15);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (m, _) = train(&c, None, &cfg).unwrap();
    let text = to_text(&m);
    assert!(text.starts_with("veilvec-ae v1"));
    assert_eq!(parse(Path::new("m"), &text).unwrap(), m);

    let broken = text.replacen("tensor bn_running_var", "tensor bn_running_vat", 1);
    assert!(parse(Path::new("m"), &broken).is_err());
}

#[test]
fn protect_is_safe_to_share_across_threads() {
    let c = toy_corpus(24, 5, 16);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (m, _) = train(&c, None, &cfg).unwrap();
    let serial: Vec<Vec<f64>> = c.items().iter().map(|e| m.protect(&e.vector, 0.5).unwrap()).collect();
    let parallel: Vec<Vec<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = c
            .items()
            .iter()
            .map(|e| s.spawn(|| m.protect(&e.vector, 0.5).unwrap()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
    let batch = m.protect_corpus(&c, 0.5).unwrap();
    for (a, b) in batch.items().iter().zip(&serial) {
        for (x, y) in a.vector.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(m.protect(&c.items()[0].vector, 1.5).is_err());
    assert!(m.protect(&[1.0, 2.0], 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn protected_vectors_have_unit_norm(
        raw in prop::collection::vec(-10.0f64..10.0, 5),
        w in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let m = small_model(5, seed);
        prop_assume!(raw.iter().any(|v| v.abs() > 1e-3));
        let out = m.protect(&raw, w).unwrap();
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }
}
