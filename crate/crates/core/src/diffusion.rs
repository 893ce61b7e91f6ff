//! Variance-exploding forward diffusion `dx = g(t) dw`.

use dcd_autodiff::{Bindings, Graph, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{bind_params, check_input, param_inputs, EnergyModel};
use crate::objectives::{build_sm_parts, LaplacianMode};

/// Diffusion coefficient `g(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Coefficient {
    /// `g(t) = g0`
    Const { g0: f64 },
    /// `g(t) = t`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VeSchedule {
    coefficient: Coefficient,
    t_max: f64,
}

impl VeSchedule {
    pub fn new(coefficient: Coefficient, t_max: f64) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(CoreError::Invalid(format!("t_max must be positive, got {t_max}")));
        }
        if let Coefficient::Const { g0 } = coefficient {
            if !(g0 > 0.0 && g0.is_finite()) {
                return Err(CoreError::Invalid(format!("g0 must be positive, got {g0}")));
            }
        }
        Ok(Self { coefficient, t_max })
    }

    pub fn constant(g0: f64, t_max: f64) -> Result<Self> {
        Self::new(Coefficient::Const { g0 }, t_max)
    }

    pub fn linear(t_max: f64) -> Result<Self> {
        Self::new(Coefficient::Linear, t_max)
    }

    pub fn coefficient(&self) -> Coefficient {
        self.coefficient
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(CoreError::TimeOutOfRange { t, t_max: self.t_max });
        }
        Ok(())
    }

    /// `g(t)²`
    pub fn g_sq(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(match self.coefficient {
            Coefficient::Const { g0 } => g0 * g0,
            Coefficient::Linear => t * t,
        })
    }

    /// Accumulated variance `Σ(t) = ∫₀ᵗ g(s)² ds`.
    pub fn sigma2(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(match self.coefficient {
            Coefficient::Const { g0 } => g0 * g0 * t,
            Coefficient::Linear => t * t * t / 3.0,
        })
    }

    /// Draws `x_t ~ N(x0, Σ(t) I)` row by row.
    pub fn perturb<R: Rng + ?Sized>(&self, x0: &Tensor, t: f64, rng: &mut R) -> Result<Tensor> {
        let var = self.sigma2(t)?;
        Ok(add_noise(x0, var, rng))
    }
}

/// `x + √var · ε`; `var == 0` returns `x` unchanged and draws nothing.
pub fn add_noise<R: Rng + ?Sized>(x: &Tensor, var: f64, rng: &mut R) -> Tensor {
    if var == 0.0 {
        return x.clone();
    }
    let sd = var.sqrt();
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += sd * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// `d f^(t)(x)/dt = ½ g(t)² (‖∇ₓf‖² + Δₓf)` per row.
pub fn energy_evolution_rate<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x: &Tensor,
    sched: &VeSchedule,
    t: f64,
    mode: LaplacianMode,
    rng: &mut R,
) -> Result<Tensor> {
    check_input(model, x)?;
    let g_sq = sched.g_sq(t)?;
    let mut g = Graph::new();
    let xn = g.input("x", x.shape());
    let pn = param_inputs(&mut g, model.params());
    let parts = build_sm_parts(&mut g, model, xn, &pn, mode)?;
    let inner = g.add(parts.sq_norm, parts.laplacian)?;
    let rate = g.scale(inner, 0.5 * g_sq);
    let probes = parts.sample_probes(x.rows(), x.cols(), rng);
    let mut b = Bindings::new().with(xn, x);
    bind_params(&mut b, &pn, model.params());
    if let (Some(node), Some(p)) = (parts.probes, probes.as_ref()) {
        b.bind(node, p);
    }
    Ok(g.eval(rate, &b)?)
}
