use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use veilvec::asv;
use veilvec::corpus::{Corpus, Embedding};

fn gaussian_corpus(speaker_scale: f64, within: &DMatrix<f64>, speakers: usize, segs: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = within.nrows();
    let lw = within.clone().cholesky().unwrap().l();
    let mut items = Vec::new();
    for s in 0..speakers {
        let y = DVector::from_fn(d, |_, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            speaker_scale * n
        });
        for j in 0..segs {
            let x = &y + &lw * DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            items.push(Embedding {
                segment_id: format!("s{s}_{j}"),
                speaker_id: format!("s{s}"),
                label: (s % 2) as u8,
                posterior_soft: None,
                vector: x.iter().copied().collect(),
            });
        }
    }
    Corpus::new(d, items).unwrap()
}

fn within_cov() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 0.8, 0.1, 0.0, 0.1, 0.5])
}

#[test]
fn no_speaker_effect_gives_small_between_covariance() {
    let data = gaussian_corpus(0.0, &within_cov(), 300, 10, 5);
    let model = asv::plda_fit(&data, 20).unwrap();
    let ratio = model.between_cov().trace() / model.within_cov().trace();
    assert!(ratio <= 0.05, "between/within trace ratio {ratio}");
}

#[test]
fn em_log_likelihood_never_decreases() {
    let data = gaussian_corpus(1.0, &within_cov(), 60, 4, 6);
    let fit = asv::plda_em(&data, None, 25).unwrap();
    assert_eq!(fit.log_likelihood.len(), 26);
    for pair in fit.log_likelihood.windows(2) {
        assert!(pair[1] >= pair[0] - 1e-8, "{} -> {}", pair[0], pair[1]);
    }
}

#[test]
fn scores_are_invariant_to_affine_maps() {
    let data = gaussian_corpus(1.0, &within_cov(), 40, 5, 7);
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.0, 1.5, 0.3, 0.7, -0.2, 0.9]);
    let b = DVector::from_row_slice(&[3.0, -1.0, 0.5]);
    let moved = data
        .map_vectors(|v| {
            let x = &a * DVector::from_column_slice(v) + &b;
            Ok(x.iter().copied().collect())
        })
        .unwrap();
    let m1 = asv::plda_fit(&data, 10).unwrap();
    let m2 = asv::plda_fit(&moved, 10).unwrap();
    for (i, j) in [(0, 1), (0, 7), (12, 13), (30, 199), (55, 180)] {
        let s1 = asv::plda_score(&m1, &data.items()[i].vector, &data.items()[j].vector).unwrap();
        let s2 = asv::plda_score(&m2, &moved.items()[i].vector, &moved.items()[j].vector).unwrap();
        assert!((s1 - s2).abs() < 1e-6, "pair ({i}, {j}): {s1} vs {s2}");
    }
}
