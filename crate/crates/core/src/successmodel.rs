//! Gaussian-mixture model of start states that led to successful executions.
//!
//! Fitting is plain EM with full covariances regularized by `reg * I` after
//! every M-step. Means are seeded k-means++ style from the data; the number of
//! components is chosen by BIC over several restarts per candidate `k`.

use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum SuccessModelError {
    #[error("need at least {k} samples for {k} components, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("component count must be positive")]
    ZeroComponents,
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("sample {index} has dimension {got}, expected {expected}")]
    InconsistentDimension {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("no feasible component count in the requested range (n = {n})")]
    NoFeasibleK { n: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, SuccessModelError>;

/// A start position (metres, one entry per workspace axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StartState(pub Vec<f64>);

impl StartState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<[f64; 2]> for StartState {
    fn from(p: [f64; 2]) -> Self {
        StartState(p.to_vec())
    }
}

/// Axis-aligned box used to keep sampled starts inside the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(SuccessModelError::InvalidBounds(
                "lower and upper corners differ in dimension".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(SuccessModelError::InvalidBounds(format!(
                "degenerate box {lo:?}..{hi:?}"
            )));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clamp(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub reg: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-8,
            reg: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub k_max: usize,
    pub n_restarts: usize,
    pub em: EmConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            k_max: 5,
            n_restarts: 5,
            em: EmConfig::default(),
        }
    }
}

/// Fitted mixture. Construct through [`fit_gmm`], [`select_by_bic`],
/// [`GmmModel::new`] or [`load_model`]; all of them enforce the invariants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmModel {
    schema: String,
    k: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    loglik: f64,
    bic: f64,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmFile {
    #[serde(default = "schema_default")]
    schema: String,
    k: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    loglik: f64,
    bic: f64,
    seed: u64,
}

fn schema_default() -> String {
    crate::SCHEMA.to_string()
}

impl<'de> Deserialize<'de> for GmmModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = GmmFile::deserialize(d)?;
        if f.schema != crate::SCHEMA {
            return Err(serde::de::Error::custom(format!(
                "unsupported schema `{}`",
                f.schema
            )));
        }
        if f.k != f.weights.len() {
            return Err(serde::de::Error::custom("k does not match weights"));
        }
        if f.means.first().is_some_and(|m| m.len() != f.dim) {
            return Err(serde::de::Error::custom("dim does not match means"));
        }
        GmmModel::new(f.weights, f.means, f.covariances, f.loglik, f.bic, f.seed)
            .map_err(serde::de::Error::custom)
    }
}

const SYMMETRY_TOL: f64 = 1e-12;

fn symmetric_min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    let mat = DMatrix::from_fn(d, d, |i, j| m[i][j]);
    mat.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
        loglik: f64,
        bic: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(SuccessModelError::InvalidModel("no components".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(SuccessModelError::InvalidModel(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SuccessModelError::InvalidModel(format!(
                "weights must be non-negative, got {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SuccessModelError::InvalidModel(format!(
                "weights sum to {total}"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(SuccessModelError::InvalidModel("zero dimension".into()));
        }
        for (c, (mean, cov)) in means.iter().zip(&covariances).enumerate() {
            if mean.len() != dim || mean.iter().any(|v| !v.is_finite()) {
                return Err(SuccessModelError::InvalidModel(format!(
                    "mean {c} is malformed"
                )));
            }
            if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
                return Err(SuccessModelError::InvalidModel(format!(
                    "covariance {c} is not {dim}x{dim}"
                )));
            }
            for i in 0..dim {
                for j in 0..dim {
                    let (a, b) = (cov[i][j], cov[j][i]);
                    if !a.is_finite() || (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0)
                    {
                        return Err(SuccessModelError::InvalidModel(format!(
                            "covariance {c} is not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
            let min_eig = symmetric_min_eigenvalue(cov);
            if !(min_eig > 0.0) {
                return Err(SuccessModelError::InvalidModel(format!(
                    "covariance {c} is not positive definite (min eigenvalue {min_eig})"
                )));
            }
        }
        if !loglik.is_finite() {
            return Err(SuccessModelError::InvalidModel("loglik is not finite".into()));
        }
        Ok(GmmModel {
            schema: crate::SCHEMA.to_string(),
            k,
            dim,
            weights,
            means,
            covariances,
            loglik,
            bic,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<Vec<f64>>] {
        &self.covariances
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn bic(&self) -> f64 {
        self.bic
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total log-likelihood of `data` under the model.
    pub fn score(&self, data: &[StartState]) -> f64 {
        let comps = Components::from_params(&self.weights, &self.means, &self.covariances);
        data.iter()
            .map(|x| comps.log_density(&DVector::from_column_slice(&x.0)))
            .sum()
    }
}

/// Number of free parameters of a full-covariance mixture.
pub fn n_free_params(k: usize, dim: usize) -> usize {
    (k - 1) + k * dim + k * dim * (dim + 1) / 2
}

/// `p ln n - 2 loglik`.
pub fn bic(loglik: f64, n: usize, p: usize) -> f64 {
    assert!(n >= 1, "BIC needs at least one sample");
    p as f64 * (n as f64).ln() - 2.0 * loglik
}

struct Components {
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    chol_l: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl Components {
    fn from_params(weights: &[f64], means: &[Vec<f64>], covs: &[Vec<Vec<f64>>]) -> Self {
        let d = means[0].len();
        let mut chol_l = Vec::with_capacity(weights.len());
        let mut log_norm = Vec::with_capacity(weights.len());
        for cov in covs {
            let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
            let l = m
                .cholesky()
                .expect("covariances are positive definite by construction")
                .l();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_norm.push(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
            chol_l.push(l);
        }
        Components {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            means: means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            chol_l,
            log_norm,
        }
    }

    fn component_log_density(&self, c: usize, x: &DVector<f64>) -> f64 {
        let diff = x - &self.means[c];
        let y = self.chol_l[c]
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm[c] - 0.5 * y.norm_squared()
    }

    /// Per-component `log w_c + log N(x | c)`.
    fn joint(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.means.len())
            .map(|c| {
                if self.log_weights[c] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    self.log_weights[c] + self.component_log_density(c, x)
                }
            })
            .collect()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        log_sum_exp(&self.joint(x))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn validate_data(data: &[StartState]) -> Result<usize> {
    let dim = data.first().map(StartState::dim).unwrap_or(0);
    for (index, x) in data.iter().enumerate() {
        if x.dim() != dim {
            return Err(SuccessModelError::InconsistentDimension {
                index,
                expected: dim,
                got: x.dim(),
            });
        }
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(SuccessModelError::NonFinite(index));
        }
    }
    if dim == 0 && !data.is_empty() {
        return Err(SuccessModelError::InconsistentDimension {
            index: 0,
            expected: 1,
            got: 0,
        });
    }
    Ok(dim)
}

/// Canonical (lexicographic) ordering so fits do not depend on input order.
fn canonical(data: &[StartState]) -> Vec<DVector<f64>> {
    let mut rows: Vec<&StartState> = data.iter().collect();
    rows.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.iter().map(|x| DVector::from_column_slice(&x.0)).collect()
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

fn to_nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn regularized_scatter(
    x: &[DVector<f64>],
    resp: impl Fn(usize) -> f64,
    mean: &DVector<f64>,
    total: f64,
    reg: f64,
) -> DMatrix<f64> {
    let d = mean.len();
    let mut s = DMatrix::<f64>::zeros(d, d);
    for (i, xi) in x.iter().enumerate() {
        let r = resp(i);
        if r == 0.0 {
            continue;
        }
        let diff = xi - mean;
        for a in 0..d {
            for b in a..d {
                s[(a, b)] += r * diff[a] * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = s[(a, b)] / total;
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
        s[(a, a)] += reg;
    }
    s
}

fn init_params(x: &[DVector<f64>], k: usize, seed: u64, reg: f64) -> Params {
    let n = x.len();
    let d = x[0].len();
    let mut rng = seed::rng(seed);
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = x.iter().map(|xi| (xi - &x[centers[0]]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, xi) in x.iter().enumerate() {
            d2[i] = d2[i].min((xi - &x[next]).norm_squared());
        }
    }
    let mean_all = x.iter().fold(DVector::zeros(d), |acc, xi| acc + xi) / n as f64;
    let pooled = to_nested(&regularized_scatter(x, |_| 1.0, &mean_all, n as f64, reg));
    Params {
        weights: vec![1.0 / k as f64; k],
        means: centers.iter().map(|&c| x[c].iter().copied().collect()).collect(),
        covs: vec![pooled; k],
    }
}

/// E-step: responsibilities (row per sample) and the total log-likelihood.
fn e_step(x: &[DVector<f64>], p: &Params) -> (Vec<Vec<f64>>, f64) {
    let comps = Components::from_params(&p.weights, &p.means, &p.covs);
    let mut total = 0.0;
    let resp = x
        .iter()
        .map(|xi| {
            let joint = comps.joint(xi);
            let lse = log_sum_exp(&joint);
            total += lse;
            joint.iter().map(|j| (j - lse).exp()).collect()
        })
        .collect();
    (resp, total)
}

fn m_step(x: &[DVector<f64>], resp: &[Vec<f64>], prev: &Params, reg: f64) -> Params {
    let n = x.len();
    let k = prev.weights.len();
    let d = x[0].len();
    let nk: Vec<f64> = (0..k).map(|c| resp.iter().map(|r| r[c]).sum()).collect();
    let total: f64 = nk.iter().sum();
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        if nk[c] <= f64::EPSILON * n as f64 {
            // Component has collapsed to zero mass; keep its shape.
            means.push(prev.means[c].clone());
            covs.push(prev.covs[c].clone());
            continue;
        }
        let mean = x
            .iter()
            .zip(resp)
            .fold(DVector::zeros(d), |acc, (xi, r)| acc + xi * r[c])
            / nk[c];
        covs.push(to_nested(&regularized_scatter(
            x,
            |i| resp[i][c],
            &mean,
            nk[c],
            reg,
        )));
        means.push(mean.iter().copied().collect());
    }
    Params {
        weights: nk.iter().map(|v| v / total).collect(),
        means,
        covs,
    }
}

/// Log-likelihood after initialization and after every EM iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub logliks: Vec<f64>,
}

/// Fits a `k`-component mixture and returns it with its per-iteration trace.
pub fn fit_gmm_traced(
    data: &[StartState],
    k: usize,
    seed: u64,
    cfg: &EmConfig,
) -> Result<(GmmModel, FitTrace)> {
    if k == 0 {
        return Err(SuccessModelError::ZeroComponents);
    }
    let dim = validate_data(data)?;
    if data.len() < k {
        return Err(SuccessModelError::TooFewSamples { n: data.len(), k });
    }
    let x = canonical(data);
    let mut params = init_params(&x, k, seed, cfg.reg);
    let (mut resp, mut ll) = e_step(&x, &params);
    let mut logliks = vec![ll];
    for _ in 0..cfg.max_iter {
        let next = m_step(&x, &resp, &params, cfg.reg);
        let (r, new_ll) = e_step(&x, &next);
        // The ridge term makes the M-step inexact; an update that lowers the
        // likelihood ends the fit with the previous parameters.
        if new_ll < ll {
            break;
        }
        params = next;
        resp = r;
        logliks.push(new_ll);
        let converged = new_ll - ll < cfg.tol;
        ll = new_ll;
        if converged {
            break;
        }
    }
    let p = n_free_params(k, dim);
    let model = GmmModel::new(
        params.weights,
        params.means,
        params.covs,
        ll,
        bic(ll, data.len(), p),
        seed,
    )?;
    Ok((model, FitTrace { logliks }))
}

pub fn fit_gmm(data: &[StartState], k: usize, seed: u64, cfg: &EmConfig) -> Result<GmmModel> {
    fit_gmm_traced(data, k, seed, cfg).map(|(m, _)| m)
}

/// Seed of restart `restart` for component count `k`.
pub fn restart_seed(seed: u64, k: usize, restart: usize) -> u64 {
    seed::derive(seed, (k as u64) << 32 | restart as u64)
}

/// A component carried by fewer than `dim + 1` effective points has a
/// covariance held up only by the ridge, and its likelihood is unbounded in
/// practice. Such fits are not candidates for selection.
fn supported(m: &GmmModel, n: usize) -> bool {
    let need = (m.dim() + 1) as f64;
    m.k() == 1 || m.weights().iter().all(|&w| w * n as f64 >= need)
}

/// Fits every feasible `k` in `k_range` (best log-likelihood over
/// `n_restarts` seeds each, ignoring restarts that collapse a component) and
/// returns the BIC minimizer; ties go to the smaller `k`.
pub fn select_by_bic(
    data: &[StartState],
    k_range: RangeInclusive<usize>,
    seed: u64,
    cfg: &SelectConfig,
) -> Result<GmmModel> {
    validate_data(data)?;
    let mut best: Option<GmmModel> = None;
    for k in k_range.filter(|&k| k >= 1 && k <= data.len()) {
        let mut best_k: Option<GmmModel> = None;
        for r in 0..cfg.n_restarts.max(1) {
            let m = fit_gmm(data, k, restart_seed(seed, k, r), &cfg.em)?;
            if !supported(&m, data.len()) {
                continue;
            }
            if best_k.as_ref().is_none_or(|b| m.loglik > b.loglik) {
                best_k = Some(m);
            }
        }
        let Some(m) = best_k else { continue };
        if best.as_ref().is_none_or(|b| m.bic < b.bic) {
            best = Some(m);
        }
    }
    best.ok_or(SuccessModelError::NoFeasibleK { n: data.len() })
}

pub const DEFAULT_MAX_ATTEMPTS: usize = 100;

/// Draws a start state: component by weight, then a Gaussian draw, retried
/// until it lands inside `bounds`; after `max_attempts` misses the last draw
/// is clamped into the box.
pub fn sample_start<R: Rng + ?Sized>(
    model: &GmmModel,
    rng: &mut R,
    bounds: &Bounds,
    max_attempts: usize,
) -> StartState {
    assert_eq!(bounds.lo.len(), model.dim, "bounds dimension mismatch");
    let d = model.dim;
    let factors: Vec<DMatrix<f64>> = model
        .covariances
        .iter()
        .map(|cov| {
            DMatrix::from_fn(d, d, |i, j| cov[i][j])
                .cholesky()
                .expect("validated covariance")
                .l()
        })
        .collect();
    let mut last = model.means[0].clone();
    for _ in 0..max_attempts.max(1) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = model.k - 1;
        for (i, w) in model.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = i;
                break;
            }
        }
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let draw = &factors[c] * z + DVector::from_column_slice(&model.means[c]);
        last = draw.iter().copied().collect();
        if bounds.contains(&last) {
            return StartState(last);
        }
    }
    StartState(bounds.clamp(&last))
}

pub fn save_model(model: &GmmModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(model)? + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GmmModel> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
