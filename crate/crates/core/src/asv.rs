//! Speaker verification backend: LDA projection, two-covariance PLDA trained by EM,
//! trial lists and trial scoring.
//!
//! The PLDA model is `x = μ + y + ε` with speaker factor `y ~ N(0, B)` and residual
//! `ε ~ N(0, W)`. Everything downstream of fitting works in the basis `T` that
//! diagonalises both covariances (`TᵀWT = I`, `TᵀBT = Λ`), where the model splits
//! into independent one-dimensional problems.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::ScoreSet;
use crate::corpus::{Corpus, Embedding};
use crate::error::{Error, Result};
use crate::metrics;
use crate::textio;

/// Relative ridge added to a scatter matrix that is not positive definite.
pub const RIDGE: f64 = 1e-6;
/// Smallest eigenvalue of the within-speaker covariance, relative to its mean eigenvalue.
pub const MIN_WITHIN_EIG: f64 = 1e-12;

const TRIALS_MAGIC: &str = "veilvec-trials v1";

/// Segments grouped by speaker, in first-appearance order.
struct Groups {
    dim: usize,
    groups: Vec<Vec<DVector<f64>>>,
}

impl Groups {
    fn new(corpus: &Corpus) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Vec<DVector<f64>>> = Vec::new();
        for e in corpus.items() {
            let g = *index.entry(e.speaker_id.as_str()).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(DVector::from_column_slice(&e.vector));
        }
        Self {
            dim: corpus.dim(),
            groups,
        }
    }

    fn n_items(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    fn require_repeated_speakers(&self, what: &str) -> Result<()> {
        let repeated = self.groups.iter().filter(|g| g.len() >= 2).count();
        if repeated < 2 {
            return Err(Error::Data(format!(
                "{what} needs at least 2 speakers with at least 2 segments each, found {repeated}"
            )));
        }
        Ok(())
    }

    fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for x in self.groups.iter().flatten() {
            m += x;
        }
        m / self.n_items() as f64
    }

    /// Within-speaker and between-speaker scatter, both normalised by the item count.
    fn scatters(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim;
        let n = self.n_items() as f64;
        let mean = self.mean();
        let mut sw = DMatrix::zeros(d, d);
        let mut sb = DMatrix::zeros(d, d);
        for g in &self.groups {
            let mut ms = DVector::zeros(d);
            for x in g {
                ms += x;
            }
            ms /= g.len() as f64;
            for x in g {
                let c = x - &ms;
                sw.ger(1.0, &c, &c, 1.0);
            }
            let c = &ms - &mean;
            sb.ger(g.len() as f64, &c, &c, 1.0);
        }
        (sw / n, sb / n)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor, retrying with growing ridges `RIDGE·trace/d·10^i` when needed.
fn regularized_cholesky(m: &DMatrix<f64>) -> Result<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let m = symmetrize(m);
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, m));
    }
    let d = m.nrows();
    let scale = (m.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = RIDGE * scale;
    for _ in 0..8 {
        let r = &m + DMatrix::identity(d, d) * eps;
        if let Some(c) = Cholesky::new(r.clone()) {
            return Ok((c, r));
        }
        eps *= 10.0;
    }
    Err(Error::Numerical(
        "scatter matrix is not positive definite even after regularisation".into(),
    ))
}

/// Solves `M v = λ S v` for symmetric `M` and positive definite `S`. Returns eigenvalues
/// in descending order and the matching `S`-orthonormal eigenvectors as columns.
fn generalized_eigen(m: &DMatrix<f64>, s_chol: &Cholesky<f64, nalgebra::Dyn>) -> (Vec<f64>, DMatrix<f64>) {
    let l = s_chol.l();
    let a = l.solve_lower_triangular(m).expect("Cholesky factor is invertible");
    let c = l
        .solve_lower_triangular(&a.transpose())
        .expect("Cholesky factor is invertible");
    let eig = SymmetricEigen::new(symmetrize(&c));
    let lt = l.transpose();
    let vecs = lt
        .solve_upper_triangular(&eig.eigenvectors)
        .expect("Cholesky factor is invertible");
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let cols: Vec<DVector<f64>> = order.iter().map(|&i| vecs.column(i).into_owned()).collect();
    (values, DMatrix::from_columns(&cols))
}

/// Flips `v` so that its first non-negligible component is positive.
fn fix_sign(v: &mut DVector<f64>) {
    let tol = v.amax() * 1e-12;
    if let Some(first) = v.iter().find(|c| c.abs() > tol) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Linear discriminant projection `x ↦ V (x − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjection {
    /// `k × d`; each row `v` satisfies `vᵀ S_w v = 1`.
    matrix: DMatrix<f64>,
    mean: DVector<f64>,
    /// Between/within variance ratio along each kept direction, descending.
    eigenvalues: Vec<f64>,
}

impl LdaProjection {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn project(&self, vector: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), vector.len())?;
        let x = DVector::from_column_slice(vector) - &self.mean;
        Ok((&self.matrix * x).as_slice().to_vec())
    }

    pub fn project_corpus(&self, corpus: &Corpus) -> Result<Corpus> {
        let items = corpus
            .items()
            .iter()
            .map(|e| {
                Ok(Embedding {
                    vector: self.project(&e.vector)?,
                    ..e.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(self.k(), items)
    }
}

/// Largest LDA dimension usable on a corpus with `n_speakers` speakers: `min(cap, d, n_speakers − 1)`.
pub fn lda_dim(cap: usize, dim: usize, n_speakers: usize) -> usize {
    cap.min(dim).min(n_speakers.saturating_sub(1))
}

/// Fits an LDA projection keeping the `k` most discriminative directions.
pub fn lda_fit(corpus: &Corpus, k: usize) -> Result<LdaProjection> {
    let groups = Groups::new(corpus);
    groups.require_repeated_speakers("LDA")?;
    let n_spk = groups.groups.len();
    if k == 0 || k > corpus.dim() || k > n_spk - 1 {
        return Err(Error::Config(format!(
            "LDA dimension {k} must lie in [1, min(d, n_speakers - 1)] = [1, {}]",
            corpus.dim().min(n_spk - 1)
        )));
    }
    let (sw, sb) = groups.scatters();
    let (chol, _) = regularized_cholesky(&sw)?;
    let (values, vecs) = generalized_eigen(&symmetrize(&sb), &chol);
    let rows: Vec<_> = (0..k)
        .map(|i| {
            let mut v = vecs.column(i).into_owned();
            fix_sign(&mut v);
            v.transpose()
        })
        .collect();
    Ok(LdaProjection {
        matrix: DMatrix::from_rows(&rows),
        mean: groups.mean(),
        eigenvalues: values[..k].to_vec(),
    })
}

/// Two-covariance PLDA model.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mu: DVector<f64>,
    between: DMatrix<f64>,
    within: DMatrix<f64>,
    /// `TᵀWT = I`, `TᵀBT = diag(lambda)`.
    transform: DMatrix<f64>,
    lambda: Vec<f64>,
    log_abs_det_t: f64,
}

impl PldaModel {
    /// Validates the parameters and precomputes the diagonalising basis.
    pub fn new(mu: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let k = mu.len();
        if between.shape() != (k, k) || within.shape() != (k, k) || k == 0 {
            return Err(Error::Dimension {
                expected: k,
                got: between.nrows().max(within.nrows()),
            });
        }
        for (name, m) in [("between", &between), ("within", &within)] {
            let scale = m.amax().max(f64::MIN_POSITIVE);
            if (m - m.transpose()).amax() > 1e-10 * scale {
                return Err(Error::Numerical(format!("{name} covariance is not symmetric")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("{name} covariance is not finite")));
            }
        }
        let within = symmetrize(&within);
        let between = symmetrize(&between);
        let w_eig = SymmetricEigen::new(within.clone()).eigenvalues;
        let mean_eig = w_eig.iter().sum::<f64>() / k as f64;
        if !(w_eig.min() >= MIN_WITHIN_EIG * mean_eig && mean_eig > 0.0) {
            return Err(Error::Numerical("within covariance is not positive definite".into()));
        }
        let chol = Cholesky::new(within.clone())
            .ok_or_else(|| Error::Numerical("within covariance is not positive definite".into()))?;
        let (values, transform) = generalized_eigen(&between, &chol);
        let b_scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        if values.iter().any(|&v| v < -1e-8 * b_scale) {
            return Err(Error::Numerical(
                "between covariance is not positive semi-definite".into(),
            ));
        }
        let lambda = values.iter().map(|v| v.max(0.0)).collect();
        let log_abs_det_t = -chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mu,
            between,
            within,
            transform,
            lambda,
            log_abs_det_t,
        })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn between_cov(&self) -> &DMatrix<f64> {
        &self.between
    }

    pub fn within_cov(&self) -> &DMatrix<f64> {
        &self.within
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Between-speaker variances in the diagonalising basis, descending.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    fn to_diag(&self, x: &DVector<f64>) -> DVector<f64> {
        self.transform.tr_mul(&(x - &self.mu))
    }
}

/// Same-speaker versus different-speaker log-likelihood ratio (natural log).
pub fn plda_score(model: &PldaModel, enroll: &[f64], test: &[f64]) -> Result<f64> {
    Error::check_dim(model.dim(), enroll.len())?;
    Error::check_dim(model.dim(), test.len())?;
    let a = model.to_diag(&DVector::from_column_slice(enroll));
    let b = model.to_diag(&DVector::from_column_slice(test));
    Ok(model
        .lambda
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(&l, (&a, &b))| {
            let ss = a * a + b * b;
            let quad = ((l + 1.0) * ss - 2.0 * l * a * b) / (2.0 * l + 1.0);
            -0.5 * (2.0 * l + 1.0).ln() + (l + 1.0).ln() - 0.5 * quad + 0.5 * ss / (l + 1.0)
        })
        .sum())
}

/// Marginal log-likelihood of a corpus, speakers independent.
pub fn log_likelihood(model: &PldaModel, corpus: &Corpus) -> Result<f64> {
    Error::check_dim(model.dim(), corpus.dim())?;
    let groups = Groups::new(corpus);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for g in &groups.groups {
        let n = g.len() as f64;
        let xs: Vec<DVector<f64>> = g.iter().map(|x| model.to_diag(x)).collect();
        for (k, &l) in model.lambda.iter().enumerate() {
            let s: f64 = xs.iter().map(|x| x[k]).sum();
            let ss: f64 = xs.iter().map(|x| x[k] * x[k]).sum();
            total += -0.5 * n * ln_2pi - 0.5 * (1.0 + n * l).ln() - 0.5 * (ss - l * s * s / (1.0 + n * l));
        }
        total += n * model.log_abs_det_t;
    }
    Ok(total)
}

/// One EM update. The M-step is exact, so the likelihood never decreases.
fn em_step(model: &PldaModel, groups: &Groups) -> Result<PldaModel> {
    let d = groups.dim;
    let n_items = groups.n_items() as f64;
    let n_spk = groups.groups.len() as f64;
    // x − μ = A x' with A = T⁻ᵀ, so W = A Aᵀ and B = A Λ Aᵀ.
    let a = model
        .transform
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("PLDA basis is singular".into()))?;

    let mut means = Vec::with_capacity(groups.groups.len());
    let mut second = DMatrix::zeros(d, d);
    let mut post_cov_weighted = DMatrix::zeros(d, d);
    for g in &groups.groups {
        let n = g.len() as f64;
        let mut s = DVector::zeros(d);
        for x in g {
            s += model.to_diag(x);
        }
        let mut m = DVector::zeros(d);
        let mut c = DVector::zeros(d);
        for (k, &l) in model.lambda.iter().enumerate() {
            m[k] = l * s[k] / (1.0 + n * l);
            c[k] = l / (1.0 + n * l);
        }
        let m_orig = &a * &m;
        let c_orig = &a * DMatrix::from_diagonal(&c) * a.transpose();
        second += &c_orig + &m_orig * m_orig.transpose();
        post_cov_weighted += c_orig * n;
        means.push(m_orig);
    }

    let mut mu = DVector::zeros(d);
    for (g, m) in groups.groups.iter().zip(&means) {
        for x in g {
            mu += x - m;
        }
    }
    mu /= n_items;

    let mut w = post_cov_weighted;
    for (g, m) in groups.groups.iter().zip(&means) {
        for x in g {
            let r = x - &mu - m;
            w.ger(1.0, &r, &r, 1.0);
        }
    }
    let w = symmetrize(&(w / n_items));
    let b = symmetrize(&(second / n_spk));
    let (_, w) = regularized_cholesky(&w)?;
    PldaModel::new(mu, b, w)
}

/// Affine-equivariant starting point: global mean, covariance of speaker means and
/// within-speaker scatter.
fn plda_init(groups: &Groups) -> Result<PldaModel> {
    let d = groups.dim;
    let mean = groups.mean();
    let (sw, _) = groups.scatters();
    let mut sb = DMatrix::zeros(d, d);
    for g in &groups.groups {
        let mut ms = DVector::zeros(d);
        for x in g {
            ms += x;
        }
        let c = ms / g.len() as f64 - &mean;
        sb.ger(1.0, &c, &c, 1.0);
    }
    let sb = symmetrize(&(sb / groups.groups.len() as f64));
    let (_, sw) = regularized_cholesky(&sw)?;
    PldaModel::new(mean, sb, sw)
}

/// Result of [`plda_em`]: the final model and the log-likelihood before each
/// iteration and after the last one.
#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: PldaModel,
    pub log_likelihood: Vec<f64>,
}

/// Runs `iters` EM iterations from `init`, or from moment estimates when `None`.
pub fn plda_em(corpus: &Corpus, init: Option<PldaModel>, iters: usize) -> Result<PldaFit> {
    let groups = Groups::new(corpus);
    groups.require_repeated_speakers("PLDA")?;
    let mut model = match init {
        Some(m) => {
            Error::check_dim(m.dim(), corpus.dim())?;
            m
        }
        None => plda_init(&groups)?,
    };
    let mut trace = vec![log_likelihood(&model, corpus)?];
    for _ in 0..iters {
        model = em_step(&model, &groups)?;
        trace.push(log_likelihood(&model, corpus)?);
    }
    Ok(PldaFit {
        model,
        log_likelihood: trace,
    })
}

/// Fits a PLDA model with `iters` EM iterations.
pub fn plda_fit(corpus: &Corpus, iters: usize) -> Result<PldaModel> {
    plda_em(corpus, None, iters).map(|f| f.model)
}

/// One verification trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }
}

/// Builds trials on a corpus. Each speaker's segments (in corpus order) are split into
/// an enrollment half (the first `⌊n/2⌋`) and a test half. Every test segment is paired
/// with one random same-speaker enrollment and with one random enrollment from each of
/// `nontargets` distinct random other speakers.
pub fn build_trials(corpus: &Corpus, nontargets: usize, seed: u64) -> Result<TrialList> {
    let mut by_spk: Vec<(&str, Vec<&str>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for e in corpus.items() {
        let i = *pos.entry(e.speaker_id.as_str()).or_insert_with(|| {
            by_spk.push((e.speaker_id.as_str(), Vec::new()));
            by_spk.len() - 1
        });
        by_spk[i].1.push(e.segment_id.as_str());
    }
    if by_spk.len() < 2 {
        return Err(Error::Data("trials need at least 2 speakers".into()));
    }
    if let Some((s, _)) = by_spk.iter().find(|(_, segs)| segs.len() < 2) {
        return Err(Error::Data(format!("speaker {s} has fewer than 2 segments")));
    }
    let nontargets = nontargets.min(by_spk.len() - 1);
    let halves: Vec<(&[&str], &[&str])> = by_spk.iter().map(|(_, segs)| segs.split_at(segs.len() / 2)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::new();
    let mut others: Vec<usize> = Vec::with_capacity(by_spk.len());
    for (s, (enroll, test)) in halves.iter().enumerate() {
        for t in test.iter() {
            let e = enroll.choose(&mut rng).expect("enrollment half is non-empty");
            trials.push(Trial {
                enroll: e.to_string(),
                test: t.to_string(),
                target: true,
            });
            others.clear();
            others.extend((0..by_spk.len()).filter(|&o| o != s));
            others.shuffle(&mut rng);
            for &o in &others[..nontargets] {
                let e = halves[o].0.choose(&mut rng).expect("enrollment half is non-empty");
                trials.push(Trial {
                    enroll: e.to_string(),
                    test: t.to_string(),
                    target: false,
                });
            }
        }
    }
    Ok(TrialList { trials })
}

/// Scores every trial. Vectors are taken from `corpus` and projected with `lda`
/// before PLDA scoring, so enrollment and test always share one transform.
pub fn run_trials(model: &PldaModel, lda: &LdaProjection, corpus: &Corpus, trials: &TrialList) -> Result<ScoreSet> {
    if trials.is_empty() {
        return Err(Error::Data("trial list is empty".into()));
    }
    Error::check_dim(lda.dim(), corpus.dim())?;
    Error::check_dim(model.dim(), lda.k())?;
    let index = corpus.index();
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut project = |id: &str, trial: usize| -> Result<Vec<f64>> {
        let &i = index
            .get(id)
            .ok_or_else(|| Error::Data(format!("trial {trial}: unknown segment `{id}`")))?;
        if let Some(v) = cache.get(&i) {
            return Ok(v.clone());
        }
        let v = lda.project(&corpus.items()[i].vector)?;
        cache.insert(i, v.clone());
        Ok(v)
    };
    let mut scores = ScoreSet::default();
    for (n, t) in trials.trials.iter().enumerate() {
        let e = project(&t.enroll, n + 1)?;
        let x = project(&t.test, n + 1)?;
        let s = plda_score(model, &e, &x)?;
        if t.target {
            scores.target.push(s);
        } else {
            scores.nontarget.push(s);
        }
    }
    Ok(scores)
}

/// Verification performance of a set of trial scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsvMetrics {
    /// Equal error rate as a fraction.
    pub eer: f64,
    pub cllr_min: f64,
}

pub fn asv_metrics(scores: &ScoreSet) -> Result<AsvMetrics> {
    Ok(AsvMetrics {
        eer: metrics::eer(scores)?,
        cllr_min: metrics::cllr_min(scores)?,
    })
}

pub fn trials_to_text(trials: &TrialList) -> String {
    let mut out = format!("{TRIALS_MAGIC}\n");
    for t in &trials.trials {
        let kind = if t.target { "target" } else { "nontarget" };
        writeln!(out, "{} {} {kind}", t.enroll, t.test).unwrap();
    }
    out
}

pub fn save_trials(trials: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    textio::write_file(path.as_ref(), &trials_to_text(trials))
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    parse_trials(path, &textio::read_to_string(path)?)
}

pub fn parse_trials(path: &Path, text: &str) -> Result<TrialList> {
    let file = textio::split_header(path, text)?;
    if file.header != TRIALS_MAGIC {
        return Err(Error::parse(
            path,
            file.header_line,
            format!("expected `{TRIALS_MAGIC}`"),
        ));
    }
    let trials = file
        .body
        .iter()
        .map(|(line, content)| {
            let toks: Vec<&str> = content.split_whitespace().collect();
            let [enroll, test, kind] = toks[..] else {
                return Err(Error::parse(
                    path,
                    *line,
                    "expected `<enroll_id> <test_id> <target|nontarget>`",
                ));
            };
            let target = match kind {
                "target" => true,
                "nontarget" => false,
                other => return Err(Error::parse(path, *line, format!("unknown trial kind `{other}`"))),
            };
            Ok(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialList { trials })
}
