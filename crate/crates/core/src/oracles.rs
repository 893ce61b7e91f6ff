//! Closed-form and brute-force checks of the diffusion contrastive divergence
//! theory on isotropic Gaussians, plus a finite-difference gradient checker.

use dcd_autodiff::Tensor;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::VeSchedule;
use crate::error::{CoreError, Result};
use crate::model::{laplacian_exact, score, EnergyModel, MlpEbm};
use crate::objectives::LossValue;

/// `N(mean, var · I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    var: f64,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) || mean.is_empty() {
            return Err(CoreError::Invalid(format!("bad Gaussian (dim {}, var {var})", mean.len())));
        }
        Ok(Self { mean, var })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn same_dim(p: &GaussianSpec, q: &GaussianSpec) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(CoreError::DimMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

fn mean_gap_sq(p: &GaussianSpec, q: &GaussianSpec) -> f64 {
    p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `KL(p_t ‖ q_t)` where both Gaussians have been diffused to time `t`.
pub fn gaussian_kl_ve(p: &GaussianSpec, q: &GaussianSpec, sched: &VeSchedule, t: f64) -> Result<f64> {
    same_dim(p, q)?;
    let s = sched.sigma2(t)?;
    let (a, b) = (p.var + s, q.var + s);
    let d = p.dim() as f64;
    Ok(0.5 * (d * a / b + mean_gap_sq(p, q) / b - d + d * (b / a).ln()))
}

/// `½ g(t)² E_{p_t} ‖∇log p_t − ∇log q_t‖²`.
pub fn score_gap_integrand(p: &GaussianSpec, q: &GaussianSpec, sched: &VeSchedule, t: f64) -> Result<f64> {
    same_dim(p, q)?;
    let s = sched.sigma2(t)?;
    let (a, b) = (p.var + s, q.var + s);
    let d = p.dim() as f64;
    let gap = d * (a - b) * (a - b) / (a * b * b) + mean_gap_sq(p, q) / (b * b);
    Ok(0.5 * sched.g_sq(t)? * gap)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcdReport {
    /// `KL(p_0‖q_0) − KL(p_T‖q_T)`
    pub kl_difference: f64,
    /// `∫₀ᵀ` of the score-gap integrand.
    pub quadrature: f64,
    pub panels: usize,
}

impl DcdReport {
    pub fn relative_gap(&self) -> f64 {
        let scale = self.kl_difference.abs().max(self.quadrature.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.kl_difference - self.quadrature).abs() / scale
        }
    }
}

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson(f: &mut impl FnMut(f64) -> Result<f64>, a: f64, b: f64, panels: usize) -> Result<f64> {
    assert!(panels >= 2 && panels % 2 == 0, "Simpson needs an even panel count");
    let h = (b - a) / panels as f64;
    let mut acc = f(a)? + f(b)?;
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h)?;
    }
    Ok(acc * h / 3.0)
}

/// Simpson from 1024 panels, doubling until two successive estimates agree
/// to `rel_tol` (Richardson error estimate `|S₂ₙ − Sₙ| / 15`).
pub fn adaptive_simpson(
    mut f: impl FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<(f64, usize)> {
    const MAX_PANELS: usize = 1 << 22;
    let mut panels = 1024;
    let mut coarse = simpson(&mut f, a, b, panels)?;
    while panels < MAX_PANELS {
        panels *= 2;
        let fine = simpson(&mut f, a, b, panels)?;
        let err = (fine - coarse).abs() / 15.0;
        if err <= rel_tol * fine.abs() || err < 1e-300 {
            return Ok((fine, panels));
        }
        coarse = fine;
    }
    Err(CoreError::Quadrature(format!(
        "no convergence on [{a}, {b}] after {MAX_PANELS} panels"
    )))
}

/// The divergence between `p` and `q` over `[0, T]` by both routes.
pub fn dcd_gaussian(p: &GaussianSpec, q: &GaussianSpec, sched: &VeSchedule, t_end: f64) -> Result<DcdReport> {
    let kl_difference = gaussian_kl_ve(p, q, sched, 0.0)? - gaussian_kl_ve(p, q, sched, t_end)?;
    let (quadrature, panels) = if t_end == 0.0 {
        (0.0, 0)
    } else {
        adaptive_simpson(|t| score_gap_integrand(p, q, sched, t), 0.0, t_end, 1e-12)?
    };
    Ok(DcdReport {
        kl_difference,
        quadrature,
        panels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneReport {
    pub values: Vec<f64>,
    /// Largest increase between consecutive grid points (0 if none).
    pub max_violation: f64,
}

pub fn kl_monotone_check(
    p: &GaussianSpec,
    q: &GaussianSpec,
    sched: &VeSchedule,
    times: &[f64],
) -> Result<MonotoneReport> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::Invalid("time grid must be increasing".into()));
    }
    let values = times
        .iter()
        .map(|&t| gaussian_kl_ve(p, q, sched, t))
        .collect::<Result<Vec<_>>>()?;
    let max_violation = values
        .windows(2)
        .map(|w| (w[1] - w[0]).max(0.0))
        .fold(0.0, f64::max);
    Ok(MonotoneReport { values, max_violation })
}

/// Per-row `⟨s(x), ∇log p(x)⟩ + ∇·s(x)` for `p = N(0, I)` and the vector
/// field `s = ∇ₓf`; its mean under `p` is zero.
pub fn stein_residuals(model: &impl EnergyModel, x: &Tensor) -> Result<Tensor> {
    let s = score(model, x)?;
    let lap = laplacian_exact(model, x)?;
    let data = (0..x.rows())
        .map(|r| {
            let inner: f64 = s.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
            lap.data()[r] - inner
        })
        .collect();
    Ok(Tensor::vector(data))
}

/// `Δp(x)` for `p = N(μ, σ² I)` two ways: the closed form
/// `p(‖x−μ‖²/σ⁴ − D/σ²)`, and `p‖∇log p‖² + p Δlog p` with the log-density
/// derivatives taken by autodiff.
pub fn gaussian_laplacian_identity(p: &GaussianSpec, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = p.dim();
    let var = p.var;
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let log_p = MlpEbm::quadratic(&p.mean, &vec![1.0 / var; d], log_norm)?;
    let s = score(&log_p, x)?;
    let lap = laplacian_exact(&log_p, x)?;
    let mut closed = Vec::with_capacity(x.rows());
    let mut via_log = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let r2: f64 = x.row(r).iter().zip(&p.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        let dens = (log_norm - 0.5 * r2 / var).exp();
        closed.push(dens * (r2 / (var * var) - d as f64 / var));
        let s2: f64 = s.row(r).iter().map(|v| v * v).sum();
        via_log.push(dens * s2 + dens * lap.data()[r]);
    }
    Ok((Tensor::vector(closed), Tensor::vector(via_log)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub element: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_abs_err: f64,
    /// `|a − f| / max(|a|, |f|, 1e-6)`; the floor keeps vanishing gradients
    /// from dominating through rounding noise.
    pub max_rel_err: f64,
}

/// Compares autodiff parameter gradients against central differences on
/// `n_probed` randomly chosen scalars. `loss` receives a freshly seeded RNG
/// on every call, so all evaluations share their random numbers.
pub fn grad_check(
    loss: impl Fn(&[Tensor], &mut ChaCha8Rng) -> Result<LossValue>,
    params: &[Tensor],
    n_probed: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let fresh = || ChaCha8Rng::seed_from_u64(seed);
    let base = loss(params, &mut fresh())?;
    let grads = base
        .grads
        .ok_or_else(|| CoreError::Invalid("loss returned no gradients".into()))?;
    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let chosen = index::sample(&mut pick, total, n_probed.min(total)).into_vec();
    let mut work = params.to_vec();
    let mut entries = Vec::with_capacity(chosen.len());
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for flat in chosen {
        let (mut param, mut element) = (0, flat);
        while element >= sizes[param] {
            element -= sizes[param];
            param += 1;
        }
        let orig = work[param].data()[element];
        work[param].data_mut()[element] = orig + h;
        let up = loss(&work, &mut fresh())?.value;
        work[param].data_mut()[element] = orig - h;
        let down = loss(&work, &mut fresh())?.value;
        work[param].data_mut()[element] = orig;
        let fd = (up - down) / (2.0 * h);
        let ad = grads[param].data()[element];
        let abs = (ad - fd).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / ad.abs().max(fd.abs()).max(1e-6));
        entries.push(GradCheckEntry {
            param,
            element,
            autodiff: ad,
            finite_diff: fd,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
    })
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (GaussianSpec, GaussianSpec, VeSchedule) {
        (
            GaussianSpec::new(vec![0.0], 1.0).unwrap(),
            GaussianSpec::new(vec![0.0], 2.0).unwrap(),
            VeSchedule::constant(1.0, 2.0).unwrap(),
        )
    }

    #[test]
    fn kl_values() {
        let (p, q, s) = pair();
        let k0 = gaussian_kl_ve(&p, &q, &s, 0.0).unwrap();
        let k1 = gaussian_kl_ve(&p, &q, &s, 1.0).unwrap();
        assert!((k0 - 0.5 * (0.5 - 1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((k0 - 0.096574).abs() < 5e-7);
        assert!((k1 - 0.036066).abs() < 5e-7);
        assert_eq!(gaussian_kl_ve(&p, &p, &s, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn two_routes_agree() {
        let (p, q, s) = pair();
        let r = dcd_gaussian(&p, &q, &s, 1.0).unwrap();
        assert!((r.kl_difference - 0.060508).abs() < 5e-7);
        assert!(r.relative_gap() < 1e-8, "{r:?}");
        let z = dcd_gaussian(&p, &p, &s, 1.0).unwrap();
        assert_eq!(z.kl_difference, 0.0);
        assert_eq!(z.quadrature, 0.0);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(&mut |t| Ok(t * t * t - t), 0.0, 2.0, 4).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn monotone_on_quarter_grid() {
        let (p, q, s) = pair();
        let times: Vec<f64> = (0..=8).map(|k| 0.25 * k as f64).collect();
        let r = kl_monotone_check(&p, &q, &s, &times).unwrap();
        assert_eq!(r.max_violation, 0.0);
        assert_eq!(r.values.len(), 9);
        let same = kl_monotone_check(&p, &p, &s, &times).unwrap();
        assert!(same.values.iter().all(|v| *v == 0.0));
        assert!(kl_monotone_check(&p, &q, &s, &[0.5, 0.25]).is_err());
    }

    #[test]
    fn lemma_identity_pointwise() {
        let p = GaussianSpec::new(vec![0.3, -0.2], 0.7).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, -2.0], vec![0.3, -0.2]]).unwrap();
        let (a, b) = gaussian_laplacian_identity(&p, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GaussianSpec::new(vec![0.0], 0.0).is_err());
        assert!(GaussianSpec::new(vec![], 1.0).is_err());
        let (p, _, s) = pair();
        let q2 = GaussianSpec::new(vec![0.0, 0.0], 1.0).unwrap();
        assert!(gaussian_kl_ve(&p, &q2, &s, 0.0).is_err());
    }
}
