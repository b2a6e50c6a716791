use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, solve_lower, solve_lower_t, Mat};

/// Zero-mean GP regression with a squared-exponential kernel. Callers
/// normalize targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSurrogate {
    pub observed_x: Vec<Vec<f64>>,
    pub observed_y: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Upper bound for jitter escalation of the noise term.
    pub max_noise: f64,
    /// Isotropic lengthscale candidates searched by [`gp_fit`].
    pub lengthscale_grid: Vec<f64>,
    #[serde(skip)]
    fitted: Option<Factor>,
}

#[derive(Clone, Debug, PartialEq)]
struct Factor {
    chol: Mat,
    alpha: Vec<f64>,
    noise: f64,
}

impl GpSurrogate {
    pub fn new(dim: usize) -> Self {
        GpSurrogate {
            observed_x: Vec::new(),
            observed_y: Vec::new(),
            lengthscales: vec![1.0; dim],
            signal_variance: 1.0,
            noise_variance: 1e-4,
            max_noise: 1e-1,
            lengthscale_grid: vec![0.1, 0.3, 1.0, 3.0],
            fitted: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn with_observations(mut self, x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        self.observed_x = x;
        self.observed_y = y;
        self.fitted = None;
        self
    }

    pub fn is_fitted(&self) -> bool {
        self.observed_x.is_empty() || self.fitted.is_some()
    }

    /// Noise variance actually used by the current factorization.
    pub fn effective_noise(&self) -> f64 {
        self.fitted.as_ref().map_or(self.noise_variance, |f| f.noise)
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        se_kernel(a, b, &self.lengthscales, self.signal_variance)
    }

    /// Log marginal likelihood of the observations under the current factorization.
    pub fn log_marginal_likelihood(&self) -> Option<f64> {
        let f = self.fitted.as_ref()?;
        let n = self.observed_y.len() as f64;
        let logdet: f64 = (0..f.chol.rows).map(|i| f.chol[(i, i)].ln()).sum();
        Some(-0.5 * dot(&self.observed_y, &f.alpha) - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }

    fn factorize(&self) -> Result<Factor> {
        let n = self.observed_x.len();
        let mut k = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.kernel(&self.observed_x[i], &self.observed_x[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let mut noise = self.noise_variance;
        loop {
            let mut kn = k.clone();
            for i in 0..n {
                kn[(i, i)] += noise;
            }
            match cholesky(&kn) {
                Ok(chol) => {
                    let alpha = solve_lower_t(&chol, &solve_lower(&chol, &self.observed_y));
                    return Ok(Factor { chol, alpha, noise });
                }
                Err(e) if noise >= self.max_noise => return Err(e),
                Err(_) => noise = if noise > 0.0 { (noise * 10.0).min(self.max_noise) } else { 1e-10 },
            }
        }
    }

    /// Lower Cholesky factor of K + noise·I, when fitted with observations.
    pub(crate) fn chol(&self) -> Option<&Mat> {
        self.fitted.as_ref().map(|f| &f.chol)
    }
}

pub fn se_kernel(a: &[f64], b: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).zip(lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    signal_variance * (-0.5 * d2).exp()
}

fn check(s: &GpSurrogate) -> Result<()> {
    if s.observed_x.len() != s.observed_y.len() {
        return Err(Error::domain("observation inputs and targets differ in count"));
    }
    if s.lengthscales.iter().any(|&l| !(l > 0.0)) || s.lengthscale_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::domain("lengthscales must be positive"));
    }
    if s.observed_x.iter().any(|x| x.len() != s.dim()) {
        return Err(Error::domain("observation dimension mismatch"));
    }
    Ok(())
}

/// Refactorizes at the current lengthscales.
pub fn gp_fit_fixed(s: &GpSurrogate) -> Result<GpSurrogate> {
    check(s)?;
    let mut out = s.clone();
    out.fitted = if s.observed_x.is_empty() { None } else { Some(s.factorize()?) };
    Ok(out)
}

/// Picks the isotropic lengthscale from the grid with the highest marginal
/// likelihood (first wins on ties), then refactorizes.
pub fn gp_fit(s: &GpSurrogate) -> Result<GpSurrogate> {
    check(s)?;
    if s.observed_x.is_empty() || s.lengthscale_grid.is_empty() {
        return gp_fit_fixed(s);
    }
    let mut best: Option<(f64, GpSurrogate)> = None;
    let mut last_err = None;
    for &l in &s.lengthscale_grid {
        let mut cand = s.clone();
        cand.lengthscales = vec![l; s.dim()];
        match gp_fit_fixed(&cand) {
            Ok(fit) => {
                let lml = fit.log_marginal_likelihood().unwrap_or(f64::NEG_INFINITY);
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, fit));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, fit)), _) => Ok(fit),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Numeric("no lengthscale produced a factorization".into())),
    }
}

/// Posterior mean and variance of the latent function at `x`.
pub fn gp_predict(s: &GpSurrogate, x: &[f64]) -> Result<(f64, f64)> {
    if x.len() != s.dim() {
        return Err(Error::domain("query dimension mismatch"));
    }
    if s.observed_x.is_empty() {
        return Ok((0.0, s.kernel(x, x)));
    }
    let f = s.fitted.as_ref().ok_or_else(|| Error::domain("surrogate has observations but no factorization"))?;
    let ks: Vec<f64> = s.observed_x.iter().map(|o| s.kernel(o, x)).collect();
    let mean = dot(&ks, &f.alpha);
    let v = solve_lower(&f.chol, &ks);
    let var = (s.kernel(x, x) - dot(&v, &v)).max(0.0);
    Ok((mean, var))
}
