use std::fmt;

use dcd_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{add_noise, VeSchedule};
use crate::error::Result;
use crate::model::{laplacian_exact, EnergyModel, HiddenActivation, MlpEbm};
use crate::objectives::{
    dcd_ve_loss, hutchinson_laplacian, LaplacianMode, LossProgram, ProbeDist,
};
use crate::oracles::{
    dcd_gaussian, gaussian_laplacian_identity, grad_check, kl_monotone_check, mean_se, stein_residuals,
    GaussianSpec,
};

/// One checked property: passes when `value ≤ tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyLine {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl VerifyLine {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

impl fmt::Display for VerifyLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} value={:.6e} tolerance={:.1e} {}",
            self.name,
            self.value,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

fn random_pair(rng: &mut ChaCha8Rng, d: usize) -> Result<(GaussianSpec, GaussianSpec)> {
    let p = GaussianSpec::new((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(), rng.gen_range(0.2..3.0))?;
    let q = GaussianSpec::new((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(), rng.gen_range(0.2..3.0))?;
    Ok((p, q))
}

/// Runs the verification suite and returns one line per property.
pub fn run_verify(seed: u64) -> Result<Vec<VerifyLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let unit = VeSchedule::constant(1.0, 2.0)?;

    // divergence between N(0,1) and N(0,2) over [0, 1]
    let p = GaussianSpec::new(vec![0.0], 1.0)?;
    let q = GaussianSpec::new(vec![0.0], 2.0)?;
    let r = dcd_gaussian(&p, &q, &unit, 1.0)?;
    let closed = 0.5 * (0.5 - 1.0 + 2f64.ln()) - 0.5 * (2.0 / 3.0 - 1.0 + 1.5f64.ln());
    lines.push(VerifyLine::new("dcd_kl_difference_abs_err", (r.kl_difference - closed).abs(), 1e-12));
    lines.push(VerifyLine::new("dcd_two_route_rel_gap", r.relative_gap(), 0.01));

    let (mut worst_gap, mut non_positive) = (0.0f64, 0.0);
    for k in 0..100 {
        let d = [1, 2, 4][k % 3];
        let (p, q) = random_pair(&mut rng, d)?;
        let t_end = rng.gen_range(0.05..2.0);
        let r = dcd_gaussian(&p, &q, &unit, t_end)?;
        worst_gap = worst_gap.max(r.relative_gap());
        if !(r.kl_difference > 0.0 && r.quadrature > 0.0) {
            non_positive += 1.0;
        }
    }
    lines.push(VerifyLine::new("dcd_random_pairs_max_rel_gap", worst_gap, 0.01));
    lines.push(VerifyLine::new("dcd_random_pairs_non_positive", non_positive, 0.0));

    let times: Vec<f64> = (0..=8).map(|k| 0.25 * k as f64).collect();
    let mono = kl_monotone_check(&p, &q, &unit, &times)?;
    lines.push(VerifyLine::new("kl_monotone_max_violation", mono.max_violation, 0.0));

    // Δp = p‖∇log p‖² + p Δlog p on Gaussians
    let g = GaussianSpec::new(vec![0.4, -0.3, 1.0], 0.8)?;
    let x = add_noise(&Tensor::zeros(&[64, 3]), 1.0, &mut rng);
    let (a, b) = gaussian_laplacian_identity(&g, &x)?;
    let lemma = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    lines.push(VerifyLine::new("laplacian_identity_max_abs_err", lemma, 1e-10));

    // Stein identity under N(0, I) for the score field of a random model
    let m = MlpEbm::init(&[2, 16, 16, 1], HiddenActivation::Gelu, seed)?;
    let xs = add_noise(&Tensor::zeros(&[20_000, 2]), 1.0, &mut rng);
    let res = stein_residuals(&m, &xs)?;
    let (mean, se) = mean_se(res.data());
    lines.push(VerifyLine::new("stein_residual_mean_over_se", mean.abs() / se, 3.0));

    // Hutchinson on −½‖x‖² is exactly −D
    let quad = MlpEbm::standard_gaussian(4)?;
    let xq = add_noise(&Tensor::zeros(&[8, 4]), 1.0, &mut rng);
    let h = hutchinson_laplacian(&quad, &xq, 3, ProbeDist::Rademacher, &mut rng)?;
    let hut = h.data().iter().map(|v| (v + 4.0).abs()).fold(0.0, f64::max);
    lines.push(VerifyLine::new("hutchinson_isotropic_max_abs_err", hut, 0.0));

    // Hutchinson mean vs exact Laplacian on a random network
    let xr = add_noise(&Tensor::zeros(&[4, 2]), 1.0, &mut rng);
    let exact = laplacian_exact(&m, &xr)?;
    let mut worst_z = 0.0f64;
    let est = hutchinson_laplacian(
        &m,
        &xr,
        4000,
        ProbeDist::Rademacher,
        &mut rng,
    )?;
    // per-probe variance from a second, independent batch of single-probe draws
    let single: Vec<Tensor> = (0..200)
        .map(|_| hutchinson_laplacian(&m, &xr, 1, ProbeDist::Rademacher, &mut rng))
        .collect::<Result<_>>()?;
    for r in 0..xr.rows() {
        let vals: Vec<f64> = single.iter().map(|t| t.data()[r]).collect();
        let (_, se1) = mean_se(&vals);
        let sd = se1 * (vals.len() as f64).sqrt();
        let se = (sd / 4000f64.sqrt()).max(1e-12);
        worst_z = worst_z.max((est.data()[r] - exact.data()[r]).abs() / se);
    }
    lines.push(VerifyLine::new("hutchinson_unbiased_max_z", worst_z, 4.0));

    // gradient checks
    let net = MlpEbm::init(&[2, 8, 8, 1], HiddenActivation::Gelu, seed + 1)?;
    let xb = crate::datasets::Dataset2D::Moons.sample(16, &mut rng);
    let dims = net.dims().to_vec();
    let sched = VeSchedule::constant(1.0, 1.0)?;
    let dcd = grad_check(
        |params, r| {
            let m = MlpEbm::from_params(&dims, HiddenActivation::Gelu, 0, params.to_vec())?;
            dcd_ve_loss(&m, &xb, 0.0005, &sched, LaplacianMode::Exact, r)
        },
        net.params(),
        10,
        1e-5,
        seed,
    )?;
    lines.push(VerifyLine::new("grad_check_dcd_ve_max_rel_err", dcd.max_rel_err, 1e-4));
    let sm = LossProgram::score_matching(&net, xb.rows(), LaplacianMode::Exact, true)?;
    let smc = grad_check(|params, r| sm.evaluate(params, &[&xb], r), net.params(), 10, 1e-5, seed)?;
    lines.push(VerifyLine::new("grad_check_sm_max_rel_err", smc.max_rel_err, 1e-4));

    // additive constant leaves the one-step loss untouched
    let mut shifted = net.clone();
    shifted.shift_output(3.7);
    let l0 = dcd_ve_loss(&net, &xb, 0.0005, &sched, LaplacianMode::Exact, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let l1 = dcd_ve_loss(&shifted, &xb, 0.0005, &sched, LaplacianMode::Exact, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut worst = (l0.value - l1.value).abs();
    for (g0, g1) in l0.grads.unwrap().iter().zip(l1.grads.unwrap().iter()) {
        for (u, v) in g0.data().iter().zip(g1.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    lines.push(VerifyLine::new("dcd_ve_constant_shift_max_abs_err", worst, 1e-10));
    Ok(lines)
}
