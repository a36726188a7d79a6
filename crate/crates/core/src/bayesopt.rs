//! Bayesian optimization with a squared-exponential GP surrogate and
//! expected improvement.
//!
//! All GP work happens on inputs scaled to the unit hypercube and on
//! standardized targets. Randomness comes from a single seeded ChaCha stream,
//! so a run is reproducible bit for bit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub type BoRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> BoRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box bounds `(lower, upper)` per dimension.
pub type Bounds = [(f64, f64)];

pub fn normalize(x: &[f64], bounds: &Bounds) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
        .collect()
}

pub fn denormalize(u: &[f64], bounds: &Bounds) -> Vec<f64> {
    u.iter()
        .zip(bounds)
        .map(|(v, (lo, hi))| lo + v * (hi - lo))
        .collect()
}

fn check_bounds(bounds: &Bounds) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::InvalidParameter("empty search box".into()));
    }
    for (i, (lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "bound {i} is not a finite interval: [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    /// Lengthscale per normalized input dimension; a single entry is
    /// broadcast to every dimension.
    pub lengthscales: Vec<f64>,
    pub signal_std: f64,
    pub noise_std: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lengthscales: vec![0.2],
            signal_std: 1.0,
            noise_std: 0.05,
        }
    }
}

impl KernelParams {
    fn lengthscale(&self, dim: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[dim]
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.lengthscales.len() == 1 || self.lengthscales.len() == dim) {
            return Err(Error::DimensionMismatch(format!(
                "bo.kernel.lengthscales has {} entries for {dim} inputs",
                self.lengthscales.len()
            )));
        }
        let ok = self
            .lengthscales
            .iter()
            .chain([&self.signal_std, &self.noise_std])
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(Error::InvalidParameter(
                "bo.kernel parameters must be finite and > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| ((x - y) / self.lengthscale(i)).powi(2))
            .sum();
        self.signal_std.powi(2) * (-0.5 * d2).exp()
    }
}

/// Exact GP regression on normalized inputs and standardized targets.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub inputs: Vec<Vec<f64>>,
    /// Standardized targets.
    pub targets: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub kernel: KernelParams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn gram(inputs: &[Vec<f64>], k: &KernelParams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = k.kernel(&inputs[i], &inputs[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
        g[(i, i)] += k.noise_std.powi(2);
    }
    g
}

/// Mean and standard deviation used to standardize targets.
pub fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl GpModel {
    /// Fits the GP on normalized inputs with fixed hyperparameters. If the
    /// Gram matrix is not positive definite the noise is raised tenfold once.
    pub fn fit(inputs: Vec<Vec<f64>>, y: &[f64], kernel: &KernelParams) -> Result<Self> {
        if inputs.len() < 2 || inputs.len() != y.len() {
            return Err(Error::InvalidParameter(format!(
                "GP needs >= 2 matched points, got {} inputs and {} targets",
                inputs.len(),
                y.len()
            )));
        }
        let dim = inputs[0].len();
        if inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch("ragged GP inputs".into()));
        }
        kernel.validate(dim)?;
        let (y_mean, y_std) = standardization(y);
        let targets: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        let mut kernel = kernel.clone();
        let chol = match Cholesky::new(gram(&inputs, &kernel)) {
            Some(c) => c,
            None => {
                kernel.noise_std *= 10.0;
                Cholesky::new(gram(&inputs, &kernel)).ok_or(Error::SingularGram)?
            }
        };
        let alpha = chol.solve(&DVector::from_column_slice(&targets));
        Ok(Self {
            inputs,
            targets,
            y_mean,
            y_std,
            kernel,
            chol,
            alpha,
        })
    }

    fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.kernel.kernel(x, xi)),
        )
    }

    /// Posterior mean and variance of the latent function at a normalized
    /// point, in standardized units. Tiny negative variances are clamped.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = self.cross(x);
        let mu = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).unwrap_or(k.clone());
        let var = self.kernel.signal_std.powi(2) - v.norm_squared();
        (mu, var.max(0.0))
    }

    /// Posterior mean and standard deviation in the original target units.
    pub fn predict_raw(&self, x: &[f64]) -> (f64, f64) {
        let (mu, var) = self.predict(x);
        (self.y_mean + self.y_std * mu, self.y_std * var.sqrt())
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = DVector::from_column_slice(&self.targets);
        let n = y.len() as f64;
        let log_det: f64 = self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * y.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Best standardized target.
    pub fn best_target(&self) -> f64 {
        self.targets.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Refits the kernel by maximizing the log marginal likelihood with a
/// seeded multi-start compass search over log-hyperparameters.
pub fn fit_hyperparameters(
    inputs: &[Vec<f64>],
    y: &[f64],
    start: &KernelParams,
    rng: &mut BoRng,
) -> Result<KernelParams> {
    let dim = inputs.first().map(|x| x.len()).unwrap_or(0);
    let to_vec = |k: &KernelParams| -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|i| k.lengthscale(i).ln()).collect();
        v.push(k.signal_std.ln());
        v.push(k.noise_std.ln());
        v
    };
    let from_vec = |v: &[f64]| KernelParams {
        lengthscales: v[..dim].iter().map(|x| x.exp()).collect(),
        signal_std: v[dim].exp(),
        noise_std: v[dim + 1].exp(),
    };
    // Keeps the search away from degenerate kernels.
    let lo: Vec<f64> = (0..dim)
        .map(|_| 0.02f64.ln())
        .chain([0.1f64.ln(), 1e-3f64.ln()])
        .collect();
    let hi: Vec<f64> = (0..dim)
        .map(|_| 5.0f64.ln())
        .chain([10.0f64.ln(), 1.0f64.ln()])
        .collect();
    let score = |v: &[f64]| -> f64 {
        GpModel::fit(inputs.to_vec(), y, &from_vec(v))
            .map(|g| g.log_marginal_likelihood())
            .unwrap_or(f64::NEG_INFINITY)
    };

    let mut starts = vec![to_vec(start)];
    for _ in 0..4 {
        starts.push(
            lo.iter()
                .zip(&hi)
                .map(|(a, b)| rng.gen_range(*a..*b))
                .collect(),
        );
    }
    let mut best = (score(&starts[0]), starts[0].clone());
    for s in starts {
        let (v, x) = compass_maximize(&score, s, &lo, &hi, 0.5, 1e-3, 400);
        if v > best.0 {
            best = (v, x);
        }
    }
    Ok(from_vec(&best.1))
}

/// Derivative-free coordinate search maximizing `f` in a box.
fn compass_maximize(
    f: &dyn Fn(&[f64]) -> f64,
    mut x: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    mut step: f64,
    min_step: f64,
    max_evals: usize,
) -> (f64, Vec<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
    let mut fx = f(&x);
    let mut evals = 1;
    while step > min_step && evals < max_evals {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] = (y[i] + dir * step).clamp(lo[i], hi[i]);
                if y[i] == x[i] {
                    continue;
                }
                let fy = f(&y);
                evals += 1;
                if fy > fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (fx, x)
}

/// Expected improvement for minimization.
pub fn expected_improvement(mu: f64, sigma: f64, j_best: f64) -> f64 {
    let imp = j_best - mu;
    if sigma <= 0.0 {
        return imp.max(0.0);
    }
    let z = imp / sigma;
    let n = Normal::standard();
    (imp * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Indices of the points kept for regression: everything when under the
/// limit, else the incumbent plus a seeded uniform sample of the rest.
pub fn active_subset(values: &[f64], limit: usize, rng: &mut BoRng) -> Vec<usize> {
    assert!(limit >= 2, "bo.active_limit must be >= 2");
    if values.len() <= limit {
        return (0..values.len()).collect();
    }
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v < values[b] { i } else { b });
    let others: Vec<usize> = (0..values.len()).filter(|&i| i != best).collect();
    let mut picked: Vec<usize> = sample(rng, others.len(), limit - 1)
        .into_iter()
        .map(|k| others[k])
        .collect();
    picked.push(best);
    picked.sort_unstable();
    picked
}

/// Latin hypercube design in the unit cube.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut BoRng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.gen_range(0..=i));
        }
        for (i, s) in strata.into_iter().enumerate() {
            pts[i][d] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    pts
}

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= b;
        r += f * (i % base as u64) as f64;
        i /= base as u64;
    }
    r
}

/// Halton points with a seeded random shift modulo 1.
pub fn shifted_halton(n: usize, dim: usize, rng: &mut BoRng) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
    (1..=n as u64)
        .map(|i| {
            (0..dim)
                .map(|d| (radical_inverse(i, PRIMES[d]) + shift[d]).fract())
                .collect()
        })
        .collect()
}

/// Number of quasi-random EI candidates per proposal.
pub const N_CANDIDATES: usize = 1024;
/// Candidates refined by local search.
const N_REFINE: usize = 8;

/// Maximizes EI over the unit cube and returns the normalized point.
pub fn propose_next_normalized(gp: &GpModel, rng: &mut BoRng) -> Vec<f64> {
    let dim = gp.inputs[0].len();
    let best = gp.best_target();
    let ei = |x: &[f64]| {
        let (mu, var) = gp.predict(x);
        expected_improvement(mu, var.sqrt(), best)
    };
    let mut cands: Vec<(f64, Vec<f64>)> = shifted_halton(N_CANDIDATES, dim, rng)
        .into_iter()
        .map(|x| (ei(&x), x))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let lo = vec![0.0; dim];
    let hi = vec![1.0; dim];
    let mut best_pt = cands[0].clone();
    for (_, x) in cands.into_iter().take(N_REFINE) {
        let (v, y) = compass_maximize(&ei, x, &lo, &hi, 0.05, 1e-5, 2000);
        if v > best_pt.0 {
            best_pt = (v, y);
        }
    }
    best_pt.1
}

/// Maximizes EI and maps the result back into `bounds`.
pub fn propose_next(gp: &GpModel, bounds: &Bounds, rng: &mut BoRng) -> Vec<f64> {
    let u = propose_next_normalized(gp, rng);
    denormalize(&u, bounds)
        .into_iter()
        .zip(bounds)
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    pub n_seeds: usize,
    pub n_iters: usize,
    pub active_limit: usize,
    pub kernel: KernelParams,
    /// Refit kernel hyperparameters every this many evaluations (0 = never).
    pub refit_every: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n_seeds: 20,
            n_iters: 50,
            active_limit: 400,
            kernel: KernelParams::default(),
            refit_every: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds < 2 {
            return Err(Error::InvalidParameter(format!(
                "bo.n_seeds must be >= 2, got {}",
                self.n_seeds
            )));
        }
        if self.active_limit < 2 {
            return Err(Error::InvalidParameter("bo.active_limit must be >= 2".into()));
        }
        self.kernel.validate(self.kernel.lengthscales.len().max(1))
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// 1-based evaluation index (seeds first).
    pub iteration: usize,
    pub x: Vec<f64>,
    pub value: f64,
    /// Best value seen up to and including this evaluation.
    pub incumbent: f64,
    pub is_seed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoState {
    pub history: Vec<Evaluation>,
    pub best_x: Vec<f64>,
    pub best_value: f64,
    pub seed: u64,
}

impl BoState {
    pub fn best_seed_value(&self) -> f64 {
        self.history
            .iter()
            .filter(|e| e.is_seed)
            .map(|e| e.value)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Seeds with a Latin hypercube, then iterates fit, propose, evaluate.
/// Non-finite objective values are an error; callers encode failures as
/// finite penalties.
pub fn bo_minimize<F>(mut objective: F, bounds: &Bounds, cfg: &BoConfig, seed: u64) -> Result<BoState>
where
    F: FnMut(&[f64]) -> f64,
{
    check_bounds(bounds)?;
    cfg.validate()?;
    let dim = bounds.len();
    if cfg.kernel.lengthscales.len() != 1 && cfg.kernel.lengthscales.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{} lengthscales for {dim} parameters",
            cfg.kernel.lengthscales.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut xs_norm: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, Vec::new());
    let mut kernel = cfg.kernel.clone();

    let mut record = |u: Vec<f64>,
                      is_seed: bool,
                      xs_norm: &mut Vec<Vec<f64>>,
                      ys: &mut Vec<f64>,
                      best: &mut (f64, Vec<f64>)|
     -> Result<()> {
        let x = denormalize(&u, bounds);
        let v = objective(&x);
        if !v.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "objective returned {v} at {x:?}"
            )));
        }
        if v < best.0 {
            *best = (v, x.clone());
        }
        history.push(Evaluation {
            iteration: history.len() + 1,
            x,
            value: v,
            incumbent: best.0,
            is_seed,
        });
        xs_norm.push(u);
        ys.push(v);
        Ok(())
    };

    for u in latin_hypercube(cfg.n_seeds, dim, &mut rng) {
        record(u, true, &mut xs_norm, &mut ys, &mut best)?;
    }
    for _ in 0..cfg.n_iters {
        let idx = active_subset(&ys, cfg.active_limit, &mut rng);
        let sub_x: Vec<Vec<f64>> = idx.iter().map(|&i| xs_norm[i].clone()).collect();
        let sub_y: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        if cfg.refit_every > 0 && ys.len() % cfg.refit_every == 0 {
            kernel = fit_hyperparameters(&sub_x, &sub_y, &kernel, &mut rng)?;
        }
        let gp = GpModel::fit(sub_x, &sub_y, &kernel)?;
        let u = propose_next_normalized(&gp, &mut rng);
        record(u, false, &mut xs_norm, &mut ys, &mut best)?;
    }
    Ok(BoState {
        history,
        best_x: best.1,
        best_value: best.0,
        seed,
    })
}

/// Uniform random search with the same budget, for baselines.
pub fn random_search<F>(mut objective: F, bounds: &Bounds, budget: usize, seed: u64) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    check_bounds(bounds)?;
    let mut rng = rng_from_seed(seed);
    let mut best = (Vec::new(), f64::INFINITY);
    for _ in 0..budget {
        let u: Vec<f64> = (0..bounds.len()).map(|_| rng.gen()).collect();
        let x = denormalize(&u, bounds);
        let v = objective(&x);
        if v < best.1 {
            best = (x, v);
        }
    }
    Ok(best)
}
