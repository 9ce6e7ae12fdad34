//! Variational sigmoid with soft-threshold-dynamics (STD) regularization.
//!
//! The activation is the minimizer over `x ∈ [0,1]^n` of
//!
//! ```text
//! E(x) = -<u,x> + ε<x, ln x> + ε<1-x, ln(1-x)> + λ1 <x, k_σ * (1-x)> + λ2 (1-c) <1, x>
//! ```
//!
//! where `k_σ` is a normalized discrete Gaussian and `c ∈ [0,1]` is a
//! per-image classification confidence. Linearizing the concave part of the
//! STD term at `x^t` and minimizing the convex remainder exactly gives the
//! fixed-point update
//!
//! ```text
//! x^{t+1} = Sig((u - λ1 k_σ * (1 - 2 x^t) - λ2 (1-c)) / ε),   x^0 = Sig(u / ε)
//! ```
//!
//! which is unrolled for a fixed number of steps. [`std_solve_backward`]
//! differentiates the unrolled iterations in reverse mode with respect to
//! `u`, `ε`, `λ1`, `λ2` and `σ`. The confidence `c` is an input constant and
//! never receives a gradient.
//!
//! Convolutions use half-sample symmetric boundary extension
//! (`… f1 f0 | f0 f1 … fn-1 | fn-1 fn-2 …`). With a symmetric kernel this
//! keeps the smoothing operator self-adjoint, which both the linearization
//! and the adjoint pass rely on.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to `x` inside the entropy terms of [`std_energy`].
pub const ENTROPY_CLAMP: f64 = 1e-7;

/// Which quantity feeds the numerator of the fixed-point update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateNumerator {
    /// `u - λ1 k*(1-2x) - λ2(1-c)`: the exact minimizer of the linearized energy.
    #[default]
    Logits,
    /// `x^t - λ1 k*(1-2x) - λ2(1-c)`: the alternative form kept for ablations.
    PreviousIterate,
}

/// Parameters of the STD activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StdParams {
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
    pub iters: usize,
    /// Gaussian support radius in pixels; `None` means `ceil(3σ)`.
    pub kernel_radius: Option<usize>,
    pub numerator: UpdateNumerator,
}

impl Default for StdParams {
    fn default() -> Self {
        Self {
            eps: 1.0,
            lambda1: 1.0,
            lambda2: 0.1,
            sigma: 1.5,
            iters: 10,
            kernel_radius: None,
            numerator: UpdateNumerator::Logits,
        }
    }
}

impl StdParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.eps) {
            return Err(Error::Parameter(format!("eps must be > 0, got {}", self.eps)));
        }
        if !positive(self.sigma) {
            return Err(Error::Parameter(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !non_negative(self.lambda1) || !non_negative(self.lambda2) {
            return Err(Error::Parameter(format!(
                "lambda1 and lambda2 must be >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.iters == 0 {
            return Err(Error::Parameter("iters must be >= 1".into()));
        }
        if self.kernel_radius == Some(0) {
            return Err(Error::Parameter("kernel radius must be >= 1".into()));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.kernel_radius
            .unwrap_or_else(|| default_radius(self.sigma))
    }
}

/// `ceil(3σ)`, at least 1.
pub fn default_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Separable normalized Gaussian `k(i,j) = p(i) p(j)` on `[-r, r]²`.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    profile: Vec<f64>,
    /// `d profile / d σ`.
    profile_dsigma: Vec<f64>,
}

impl GaussianKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// The normalized 1D profile; the 2D kernel is its outer product.
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    /// The dense `(2r+1)×(2r+1)` kernel.
    pub fn weights(&self) -> Array2<f64> {
        let n = self.profile.len();
        Array2::from_shape_fn((n, n), |(i, j)| self.profile[i] * self.profile[j])
    }

    /// The dense derivative of the kernel with respect to σ.
    pub fn weights_dsigma(&self) -> Array2<f64> {
        let n = self.profile.len();
        Array2::from_shape_fn((n, n), |(i, j)| {
            self.profile_dsigma[i] * self.profile[j] + self.profile[i] * self.profile_dsigma[j]
        })
    }
}

/// Builds the normalized discrete Gaussian with standard deviation `sigma`
/// (in pixels) on a `(2·radius+1)²` stencil.
///
/// Entries are proportional to `exp(-(i²+j²)/(2σ²))` and sum to one. The
/// 2D normalization factorizes, so the kernel is stored as a 1D profile.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<GaussianKernel> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::Parameter("kernel radius must be >= 1".into()));
    }
    let r = radius as isize;
    let s2 = sigma * sigma;
    let s3 = s2 * sigma;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * s2)).exp())
        .collect();
    let raw_d: Vec<f64> = (-r..=r)
        .zip(&raw)
        .map(|(i, g)| g * (i * i) as f64 / s3)
        .collect();
    let total: f64 = raw.iter().sum();
    let total_d: f64 = raw_d.iter().sum();
    let profile = raw.iter().map(|g| g / total).collect();
    let profile_dsigma = raw
        .iter()
        .zip(&raw_d)
        .map(|(g, dg)| (dg * total - g * total_d) / (total * total))
        .collect();
    Ok(GaussianKernel {
        sigma,
        radius,
        profile,
        profile_dsigma,
    })
}

/// Maps an out-of-range index onto `0..n` by half-sample symmetric
/// reflection, repeated as often as needed.
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn filter_rows(field: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = field.dim();
    let r = (taps.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    let idx: Vec<Vec<usize>> = (0..w as isize)
        .map(|x| (-r..=r).map(|d| symmetric_index(x + d, w)).collect())
        .collect();
    for y in 0..h {
        let row = field.row(y);
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &src) in taps.iter().zip(&idx[x]) {
                acc += t * row[src];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn filter_cols(field: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = field.dim();
    let r = (taps.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let src = symmetric_index(y as isize + k as isize - r, h);
            let src_row = field.row(src);
            let mut dst = out.row_mut(y);
            Zip::from(&mut dst).and(&src_row).for_each(|o, &v| *o += t * v);
        }
    }
    out
}

/// `k_σ * f` with half-sample symmetric boundary extension.
pub fn smooth(field: &Array2<f64>, kernel: &GaussianKernel) -> Array2<f64> {
    filter_cols(&filter_rows(field, &kernel.profile), &kernel.profile)
}

/// `(∂k_σ/∂σ) * f`, same boundary handling as [`smooth`].
pub fn smooth_dsigma(field: &Array2<f64>, kernel: &GaussianKernel) -> Array2<f64> {
    let a = filter_cols(&filter_rows(field, &kernel.profile), &kernel.profile_dsigma);
    let b = filter_cols(&filter_rows(field, &kernel.profile_dsigma), &kernel.profile);
    a + b
}

/// Numerically stable logistic function, kept strictly inside `(0,1)`.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Closed-form minimizer of `-<u,x> + ε<x,ln x> + ε<1-x,ln(1-x)>`:
/// `Sig(u/ε)` elementwise.
pub fn variational_sigmoid(u: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    Ok(u.mapv(|v| sigmoid(v / eps)))
}

fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("confidence must lie in [0,1], got {c}")))
    }
}

/// The regularized energy minimized by [`std_solve`].
///
/// `x` must lie strictly inside `(0,1)`; the entropy terms additionally clamp
/// to `[1e-7, 1-1e-7]`.
pub fn std_energy(x: &Array2<f64>, u: &Array2<f64>, c: f64, p: &StdParams) -> Result<f64> {
    p.validate()?;
    check_confidence(c)?;
    if x.dim() != u.dim() {
        return Err(Error::Shape(format!(
            "x {:?} and u {:?} differ",
            x.dim(),
            u.dim()
        )));
    }
    if let Some(bad) = x.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("x must lie in (0,1), found {bad}")));
    }
    let kernel = gaussian_kernel(p.sigma, p.radius())?;
    let complement = x.mapv(|v| 1.0 - v);
    let smoothed = smooth(&complement, &kernel);

    let mut energy = 0.0;
    Zip::from(x)
        .and(u)
        .and(&smoothed)
        .for_each(|&xv, &uv, &kv| {
            let xc = xv.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
            energy += -uv * xv
                + p.eps * (xc * xc.ln() + (1.0 - xc) * (1.0 - xc).ln())
                + p.lambda1 * xv * kv
                + p.lambda2 * (1.0 - c) * xv;
        });
    Ok(energy)
}

/// Intermediate state of the unrolled iterations, kept for the adjoint pass.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `x^0 ..= x^T`.
    pub iterates: Vec<Array2<f64>>,
    /// Update numerators; `numerators[t]` produced `iterates[t]` via `Sig(·/ε)`.
    pub numerators: Vec<Array2<f64>>,
}

impl Trajectory {
    pub fn output(&self) -> &Array2<f64> {
        self.iterates.last().expect("trajectory holds x^0")
    }
}

/// Runs the unrolled solver and records every iterate.
pub fn std_trajectory(u: &Array2<f64>, c: f64, p: &StdParams) -> Result<Trajectory> {
    p.validate()?;
    check_confidence(c)?;
    let kernel = gaussian_kernel(p.sigma, p.radius())?;
    let prior = p.lambda2 * (1.0 - c);

    let mut iterates = Vec::with_capacity(p.iters + 1);
    let mut numerators = Vec::with_capacity(p.iters + 1);
    numerators.push(u.clone());
    iterates.push(u.mapv(|v| sigmoid(v / p.eps)));

    for _ in 0..p.iters {
        let x = iterates.last().expect("nonempty");
        let base = match p.numerator {
            UpdateNumerator::Logits => u,
            UpdateNumerator::PreviousIterate => x,
        };
        let numerator = if p.lambda1 == 0.0 {
            base.mapv(|b| b - prior)
        } else {
            let smoothed = smooth(&x.mapv(|v| 1.0 - 2.0 * v), &kernel);
            Zip::from(base)
                .and(&smoothed)
                .map_collect(|&b, &k| b - p.lambda1 * k - prior)
        };
        iterates.push(numerator.mapv(|n| sigmoid(n / p.eps)));
        numerators.push(numerator);
    }
    Ok(Trajectory {
        iterates,
        numerators,
    })
}

/// Solves the STD-regularized activation by `p.iters` unrolled fixed-point steps.
pub fn std_solve(u: &Array2<f64>, c: f64, p: &StdParams) -> Result<Array2<f64>> {
    let mut traj = std_trajectory(u, c, p)?;
    Ok(traj.iterates.pop().expect("nonempty"))
}

/// Gradients of a scalar loss through [`std_solve`].
#[derive(Debug, Clone)]
pub struct StdGradients {
    pub u: Array2<f64>,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
}

/// Reverse-mode derivative of `L(std_solve(u, c, p))` given `∂L/∂x^T`.
pub fn std_solve_backward(
    u: &Array2<f64>,
    c: f64,
    p: &StdParams,
    grad_output: &Array2<f64>,
) -> Result<StdGradients> {
    let traj = std_trajectory(u, c, p)?;
    std_backward_from(&traj, c, p, grad_output)
}

/// Adjoint pass over a recorded trajectory.
pub fn std_backward_from(
    traj: &Trajectory,
    c: f64,
    p: &StdParams,
    grad_output: &Array2<f64>,
) -> Result<StdGradients> {
    let out = traj.output();
    if grad_output.dim() != out.dim() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match output {:?}",
            grad_output.dim(),
            out.dim()
        )));
    }
    let kernel = gaussian_kernel(p.sigma, p.radius())?;
    let eps = p.eps;
    let mut grads = StdGradients {
        u: Array2::zeros(out.dim()),
        eps: 0.0,
        lambda1: 0.0,
        lambda2: 0.0,
        sigma: 0.0,
    };

    let mut g = grad_output.clone();
    for t in (0..traj.iterates.len()).rev() {
        let x = &traj.iterates[t];
        let numerator = &traj.numerators[t];
        // ∂L/∂numerator = g · x(1-x) / ε
        let gn = Zip::from(&g).and(x).map_collect(|&gv, &xv| gv * xv * (1.0 - xv) / eps);
        grads.eps -= Zip::from(&gn)
            .and(numerator)
            .fold(0.0, |acc, &a, &b| acc + a * b)
            / eps;

        if t == 0 {
            grads.u += &gn;
            break;
        }

        let prev = &traj.iterates[t - 1];
        let gn_sum = gn.sum();
        grads.lambda2 -= (1.0 - c) * gn_sum;
        let complement = prev.mapv(|v| 1.0 - 2.0 * v);
        let smoothed = smooth(&complement, &kernel);
        grads.lambda1 -= Zip::from(&gn).and(&smoothed).fold(0.0, |acc, &a, &b| acc + a * b);
        if p.lambda1 != 0.0 {
            let dsmoothed = smooth_dsigma(&complement, &kernel);
            grads.sigma -=
                p.lambda1 * Zip::from(&gn).and(&dsmoothed).fold(0.0, |acc, &a, &b| acc + a * b);
        }

        // numerator_t = base - λ1 k*(1 - 2 x^{t-1}) - prior
        let mut g_prev = smooth(&gn, &kernel);
        g_prev.mapv_inplace(|v| 2.0 * p.lambda1 * v);
        match p.numerator {
            UpdateNumerator::Logits => grads.u += &gn,
            UpdateNumerator::PreviousIterate => g_prev += &gn,
        }
        g = g_prev;
    }
    Ok(grads)
}
