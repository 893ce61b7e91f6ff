//! Energy networks `f_θ(x)`; the model density is `exp(f_θ(x)) / Z_θ`.
//!
//! `Z_θ` is never represented. Scores and Laplacians are taken with respect to
//! `x`, where the normalizer drops out.

use std::fmt::Write as _;
use std::path::Path;

use dcd_autodiff::{Activation, Bindings, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Exact Laplacians cost one extra backward pass per input coordinate.
pub const MAX_EXACT_DIM: usize = 16;

/// A scalar energy per input row, expressed as a graph over parameter nodes.
pub trait EnergyModel {
    fn input_dim(&self) -> usize;

    fn params(&self) -> &[Tensor];

    /// Appends the per-row energies of `x` (`batch × input_dim`) and returns
    /// the `(batch,)` node. `params` are nodes bound to [`Self::params`].
    fn build_energy(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId>;
}

/// Declares one input node per parameter tensor.
pub fn param_inputs(g: &mut Graph, params: &[Tensor]) -> Vec<NodeId> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| g.input(format!("theta{i}"), p.shape()))
        .collect()
}

pub fn bind_params<'a>(b: &mut Bindings<'a>, nodes: &[NodeId], params: &'a [Tensor]) {
    for (n, p) in nodes.iter().zip(params) {
        b.bind(*n, p);
    }
}

pub(crate) fn check_input(model: &impl EnergyModel, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.cols() != model.input_dim() {
        return Err(CoreError::DimMismatch {
            expected: model.input_dim(),
            got: if x.rank() == 2 { x.cols() } else { x.numel() },
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Gelu,
    Silu,
    /// Elementwise square; realizes exact quadratic energies for testing.
    Square,
}

impl HiddenActivation {
    pub fn tag(self) -> &'static str {
        match self {
            HiddenActivation::Gelu => "gelu",
            HiddenActivation::Silu => "silu",
            HiddenActivation::Square => "square",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "gelu" => Some(HiddenActivation::Gelu),
            "silu" => Some(HiddenActivation::Silu),
            "square" => Some(HiddenActivation::Square),
            _ => None,
        }
    }

    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            HiddenActivation::Gelu => g.activation(x, Activation::Gelu, 0),
            HiddenActivation::Silu => g.activation(x, Activation::Silu, 0),
            HiddenActivation::Square => g.square(x),
        }
    }
}

/// Fully connected energy network `dims[0] → … → 1`, activation after every
/// hidden layer, no normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEbm {
    dims: Vec<usize>,
    activation: HiddenActivation,
    seed: u64,
    /// `[W0, b0, W1, b1, …]`, `W` stored `fan_in × fan_out`.
    params: Vec<Tensor>,
}

impl MlpEbm {
    /// Fan-in uniform initialization: weights in `±√(1/fan_in)`, zero biases.
    pub fn init(dims: &[usize], activation: HiddenActivation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || *dims.last().unwrap() != 1 || dims.contains(&0) {
            return Err(CoreError::Invalid(format!(
                "MLP dims must be positive and end in 1, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, data)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            seed,
            params,
        })
    }

    /// Builds a model from explicit parameters `[W0, b0, …]`.
    pub fn from_params(
        dims: &[usize],
        activation: HiddenActivation,
        seed: u64,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let mut model = Self::init(dims, activation, seed)?;
        if params.len() != model.params.len()
            || params
                .iter()
                .zip(&model.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(CoreError::Invalid(format!(
                "parameter shapes do not match dims {dims:?}"
            )));
        }
        model.params = params;
        Ok(model)
    }

    /// `f(x) = −½ Σᵢ pᵢ (xᵢ − μᵢ)² + c`, as a one-hidden-layer square network.
    pub fn quadratic(center: &[f64], precision: &[f64], offset: f64) -> Result<Self> {
        let d = center.len();
        if precision.len() != d {
            return Err(CoreError::Invalid("center/precision length mismatch".into()));
        }
        let mut w0 = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w0.data_mut()[i * d + i] = 1.0;
        }
        let b0 = Tensor::vector(center.iter().map(|m| -m).collect());
        let w1 = Tensor::matrix(d, 1, precision.iter().map(|p| -0.5 * p).collect())?;
        let b1 = Tensor::vector(vec![offset]);
        Self::from_params(&[d, d, 1], HiddenActivation::Square, 0, vec![w0, b0, w1, b1])
    }

    /// The standard-normal energy `−½‖x‖²`.
    pub fn standard_gaussian(dim: usize) -> Result<Self> {
        Self::quadratic(&vec![0.0; dim], &vec![1.0; dim], 0.0)
    }

    /// `f(x) = c` everywhere.
    pub fn constant(dim: usize, value: f64) -> Result<Self> {
        Self::from_params(
            &[dim, 1],
            HiddenActivation::Gelu,
            0,
            vec![Tensor::zeros(&[dim, 1]), Tensor::vector(vec![value])],
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> HiddenActivation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Shifts every energy by `c` through the output bias.
    pub fn shift_output(&mut self, c: f64) {
        let last = self.params.last_mut().expect("output bias");
        last.data_mut()[0] += c;
    }
}

impl EnergyModel for MlpEbm {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn build_energy(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.dims[0] {
            return Err(CoreError::DimMismatch {
                expected: self.dims[0],
                got: xs.last().copied().unwrap_or(0),
            });
        }
        let layers = self.dims.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = g.affine(h, params[2 * l], params[2 * l + 1])?;
            if l + 1 < layers {
                h = self.activation.apply(g, h);
            }
        }
        Ok(g.sum_axis(h, 1)?)
    }
}

/// Time input fed to a [`TimeEbm`] next to `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TimeFeature {
    /// `t` itself as one extra coordinate.
    Scalar,
    /// `[sin(2ʲ t), cos(2ʲ t)]` for `j < frequencies`.
    Sinusoidal { frequencies: usize },
}

impl TimeFeature {
    pub fn width(self) -> usize {
        match self {
            TimeFeature::Scalar => 1,
            TimeFeature::Sinusoidal { frequencies } => 2 * frequencies,
        }
    }

    pub fn features(self, t: f64) -> Vec<f64> {
        match self {
            TimeFeature::Scalar => vec![t],
            TimeFeature::Sinusoidal { frequencies } => (0..frequencies)
                .flat_map(|j| {
                    let w = (1u64 << j) as f64 * t;
                    [w.sin(), w.cos()]
                })
                .collect(),
        }
    }
}

/// Time-conditioned energy `f_θ(x, t)`: an [`MlpEbm`] over `[x, τ(t)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEbm {
    net: MlpEbm,
    feature: TimeFeature,
    t_max: f64,
}

impl TimeEbm {
    pub fn init(
        dim: usize,
        hidden: &[usize],
        feature: TimeFeature,
        activation: HiddenActivation,
        t_max: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![dim + feature.width()];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            net: MlpEbm::init(&dims, activation, seed)?,
            feature,
            t_max,
        })
    }

    pub fn from_net(net: MlpEbm, feature: TimeFeature, t_max: f64) -> Result<Self> {
        if net.input_dim() <= feature.width() {
            return Err(CoreError::Invalid("network too narrow for time feature".into()));
        }
        Ok(Self { net, feature, t_max })
    }

    /// Wraps a spatial model so the time input has zero weight.
    pub fn from_spatial(spatial: &MlpEbm, feature: TimeFeature, t_max: f64) -> Result<Self> {
        let k = feature.width();
        let mut dims = spatial.dims().to_vec();
        dims[0] += k;
        let mut params = spatial.params().to_vec();
        let w0 = &params[0];
        let mut data = w0.data().to_vec();
        data.extend(std::iter::repeat(0.0).take(k * w0.cols()));
        params[0] = Tensor::matrix(dims[0], w0.cols(), data)?;
        let net = MlpEbm::from_params(&dims, spatial.activation(), spatial.seed(), params)?;
        Self::from_net(net, feature, t_max)
    }

    pub fn net(&self) -> &MlpEbm {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpEbm {
        &mut self.net
    }

    pub fn feature(&self) -> TimeFeature {
        self.feature
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - self.feature.width()
    }

    /// The energy slice `x ↦ f_θ(x, t)`.
    pub fn at(&self, t: f64) -> TimeSlice<'_> {
        TimeSlice { model: self, t }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TimeSlice<'a> {
    model: &'a TimeEbm,
    t: f64,
}

impl TimeSlice<'_> {
    pub fn time(&self) -> f64 {
        self.t
    }
}

impl EnergyModel for TimeSlice<'_> {
    fn input_dim(&self) -> usize {
        self.model.dim()
    }

    fn params(&self) -> &[Tensor] {
        self.model.net.params()
    }

    fn build_energy(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(CoreError::DimMismatch {
                expected: self.input_dim(),
                got: xs.last().copied().unwrap_or(0),
            });
        }
        let row = self.model.feature.features(self.t);
        let k = row.len();
        let data = (0..xs[0]).flat_map(|_| row.iter().copied()).collect();
        let feat = g.constant(Tensor::matrix(xs[0], k, data)?);
        let xt = g.concat_cols(x, feat)?;
        self.model.net.build_energy(g, xt, params)
    }
}

// ---- graph-level building blocks ------------------------------------------

/// Per-row energies and scores `∇ₓ f` of the `x` node.
pub fn score_nodes(
    g: &mut Graph,
    model: &impl EnergyModel,
    x: NodeId,
    params: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    let energy = model.build_energy(g, x, params)?;
    let total = g.sum(energy);
    let score = g.grad(total, &[x])?[0];
    Ok((energy, score))
}

/// `Σᵢ ∂²f/∂xᵢ²` per row: one directional backward pass per coordinate.
pub fn exact_laplacian_node(g: &mut Graph, x: NodeId, score: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let d = shape[1];
    if d > MAX_EXACT_DIM {
        return Err(CoreError::DimTooLarge {
            dim: d,
            max: MAX_EXACT_DIM,
        });
    }
    let mut lap: Option<NodeId> = None;
    for i in 0..d {
        let si = g.slice_cols(score, i, 1)?;
        let si = g.sum(si);
        let hess_row = g.grad(si, &[x])?[0];
        let hii = g.slice_cols(hess_row, i, 1)?;
        let hii = g.sum_axis(hii, 1)?;
        lap = Some(match lap {
            Some(acc) => g.add(acc, hii)?,
            None => hii,
        });
    }
    lap.ok_or_else(|| CoreError::Invalid("zero-dimensional input".into()))
}

/// Per-row `vᵀ ∇ₓ(score · v)`, the Hutchinson quadratic form for probe rows `v`.
pub fn hutchinson_node(g: &mut Graph, x: NodeId, score: NodeId, probes: NodeId) -> Result<NodeId> {
    let sv = g.dot(score, probes)?;
    let sv = g.sum(sv);
    let hv = g.grad(sv, &[x])?[0];
    Ok(g.dot(hv, probes)?)
}

// ---- one-shot evaluations -------------------------------------------------

fn with_graph<M: EnergyModel>(
    model: &M,
    x: &Tensor,
    build: impl FnOnce(&mut Graph, NodeId, &[NodeId]) -> Result<NodeId>,
) -> Result<Tensor> {
    check_input(model, x)?;
    let mut g = Graph::new();
    let xn = g.input("x", x.shape());
    let pn = param_inputs(&mut g, model.params());
    let out = build(&mut g, xn, &pn)?;
    let mut b = Bindings::new().with(xn, x);
    bind_params(&mut b, &pn, model.params());
    Ok(g.eval(out, &b)?)
}

/// `f_θ(x)` for each row of `x`.
pub fn energy(model: &impl EnergyModel, x: &Tensor) -> Result<Tensor> {
    with_graph(model, x, |g, xn, pn| model.build_energy(g, xn, pn))
}

/// `∇ₓ f_θ(x)` for each row of `x`.
pub fn score(model: &impl EnergyModel, x: &Tensor) -> Result<Tensor> {
    with_graph(model, x, |g, xn, pn| Ok(score_nodes(g, model, xn, pn)?.1))
}

/// `Δₓ f_θ(x)` for each row of `x`, exactly (input dimension ≤ 16).
pub fn laplacian_exact(model: &impl EnergyModel, x: &Tensor) -> Result<Tensor> {
    if model.input_dim() > MAX_EXACT_DIM {
        return Err(CoreError::DimTooLarge {
            dim: model.input_dim(),
            max: MAX_EXACT_DIM,
        });
    }
    with_graph(model, x, |g, xn, pn| {
        let (_, s) = score_nodes(g, model, xn, pn)?;
        exact_laplacian_node(g, xn, s)
    })
}

// ---- checkpoints -----------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "dcd-ebm 1";

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Mlp(MlpEbm),
    Time(TimeEbm),
}

impl Checkpoint {
    pub fn mlp(&self) -> &MlpEbm {
        match self {
            Checkpoint::Mlp(m) => m,
            Checkpoint::Time(t) => t.net(),
        }
    }

    pub fn params(&self) -> &[Tensor] {
        self.mlp().params()
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        match self {
            Checkpoint::Mlp(m) => m.params_mut(),
            Checkpoint::Time(t) => t.net_mut().params_mut(),
        }
    }

    /// Dimension of `x` (time features excluded).
    pub fn dim(&self) -> usize {
        match self {
            Checkpoint::Mlp(m) => m.input_dim(),
            Checkpoint::Time(t) => t.dim(),
        }
    }

    /// Text form: a header (kind, dims, activation, seed) followed by one
    /// parameter value per line. Values use shortest round-trip formatting,
    /// so parsing reproduces every bit.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        match self {
            Checkpoint::Mlp(_) => writeln!(s, "kind mlp").unwrap(),
            Checkpoint::Time(t) => {
                match t.feature() {
                    TimeFeature::Scalar => writeln!(s, "kind time scalar").unwrap(),
                    TimeFeature::Sinusoidal { frequencies } => {
                        writeln!(s, "kind time sinusoidal {frequencies}").unwrap()
                    }
                }
                writeln!(s, "t_max {:?}", t.t_max()).unwrap();
            }
        }
        let m = self.mlp();
        let dims: Vec<String> = m.dims().iter().map(usize::to_string).collect();
        writeln!(s, "dims {}", dims.join(" ")).unwrap();
        writeln!(s, "activation {}", m.activation().tag()).unwrap();
        writeln!(s, "seed {}", m.seed()).unwrap();
        writeln!(s, "params {}", m.param_count()).unwrap();
        for p in m.params() {
            for v in p.data() {
                writeln!(s, "{v:?}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| CoreError::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(CoreError::Checkpoint(format!("expected `{name}`, got `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let kind = field("kind")?;
        let time = match kind.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["mlp"] => None,
            ["time", rest @ ..] => {
                let feature = match rest {
                    ["scalar"] => TimeFeature::Scalar,
                    ["sinusoidal", n] => TimeFeature::Sinusoidal {
                        frequencies: n.parse().map_err(|_| bad("bad frequency count"))?,
                    },
                    _ => return Err(bad("unknown time feature")),
                };
                let t_max: f64 = field("t_max")?
                    .first()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad t_max"))?;
                Some((feature, t_max))
            }
            _ => return Err(bad("unknown model kind")),
        };
        let dims: Vec<usize> = field("dims")?
            .iter()
            .map(|v| v.parse().map_err(|_| bad("bad dims")))
            .collect::<Result<_>>()?;
        let act = field("activation")?;
        let activation = act
            .first()
            .and_then(|a| HiddenActivation::from_tag(a))
            .ok_or_else(|| bad("unknown activation"))?;
        let seed: u64 = field("seed")?
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad seed"))?;
        let count: usize = field("params")?
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad parameter count"))?;
        let values: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad("bad parameter value")))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(CoreError::Checkpoint(format!(
                "expected {count} parameters, found {}",
                values.len()
            )));
        }
        let template = MlpEbm::init(&dims, activation, seed)?;
        if template.param_count() != count {
            return Err(bad("parameter count does not match dims"));
        }
        let mut offset = 0;
        let params = template
            .params()
            .iter()
            .map(|p| {
                let n = p.numel();
                let t = Tensor::new(p.shape().to_vec(), values[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let net = MlpEbm::from_params(&dims, activation, seed, params)?;
        Ok(match time {
            None => Checkpoint::Mlp(net),
            Some((feature, t_max)) => Checkpoint::Time(TimeEbm::from_net(net, feature, t_max)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Tensor {
        Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3]]).unwrap()
    }

    #[test]
    fn quadratic_energy_score_laplacian() {
        let m = MlpEbm::standard_gaussian(2).unwrap();
        let x = pts();
        let e = energy(&m, &x).unwrap();
        assert_eq!(e.data()[0], -2.5);
        let s = score(&m, &x).unwrap();
        assert_eq!(s.row(0), &[-1.0, -2.0]);
        let l = laplacian_exact(&m, &x).unwrap();
        assert_eq!(l.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn diagonal_quadratic_trace() {
        // f = ½xᵀ diag(1,3) x
        let m = MlpEbm::quadratic(&[0.0, 0.0], &[-1.0, -3.0], 0.0).unwrap();
        let l = laplacian_exact(&m, &pts()).unwrap();
        assert!(l.data().iter().all(|v| (v - 4.0).abs() < 1e-14));
    }

    #[test]
    fn constant_model() {
        let m = MlpEbm::constant(2, 0.7).unwrap();
        let x = pts();
        assert_eq!(energy(&m, &x).unwrap().data(), &[0.7, 0.7]);
        assert_eq!(score(&m, &x).unwrap(), Tensor::zeros(&[2, 2]));
        assert_eq!(laplacian_exact(&m, &x).unwrap(), Tensor::zeros(&[2]));
    }

    #[test]
    fn zero_weights_give_last_bias() {
        let mut m = MlpEbm::init(&[2, 5, 1], HiddenActivation::Gelu, 3).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.shift_output(-1.25);
        assert_eq!(energy(&m, &pts()).unwrap().data(), &[-1.25, -1.25]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MlpEbm::init(&[2, 300, 300, 300, 1], HiddenActivation::Gelu, 11).unwrap();
        let b = MlpEbm::init(&[2, 300, 300, 300, 1], HiddenActivation::Gelu, 11).unwrap();
        let c = MlpEbm::init(&[2, 300, 300, 300, 1], HiddenActivation::Gelu, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert_eq!(a.param_count(), 2 * 300 + 300 + 2 * (300 * 300 + 300) + 300 + 1);
        let bound = (1.0f64 / 300.0).sqrt();
        assert!(bound < 0.0578 && bound > 0.0577);
        for w in [&a.params()[2], &a.params()[4], &a.params()[6]] {
            assert!(w.data().iter().all(|v| v.abs() <= bound));
        }
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let m = MlpEbm::standard_gaussian(3).unwrap();
        assert!(matches!(energy(&m, &pts()), Err(CoreError::DimMismatch { .. })));
        let big = MlpEbm::init(&[17, 4, 1], HiddenActivation::Gelu, 0).unwrap();
        let x = Tensor::zeros(&[1, 17]);
        assert!(matches!(
            laplacian_exact(&big, &x),
            Err(CoreError::DimTooLarge { .. })
        ));
    }

    #[test]
    fn time_slices_differ() {
        for seed in 0..5 {
            let m = TimeEbm::init(2, &[16, 16], TimeFeature::Scalar, HiddenActivation::Gelu, 1.0, seed)
                .unwrap();
            let x = pts();
            let a = energy(&m.at(0.1), &x).unwrap();
            let b = energy(&m.at(0.9), &x).unwrap();
            assert_ne!(a, b);
        }
        let m = TimeEbm::init(
            2,
            &[8],
            TimeFeature::Sinusoidal { frequencies: 3 },
            HiddenActivation::Silu,
            1.0,
            1,
        )
        .unwrap();
        assert_eq!(m.net().input_dim(), 8);
        assert_ne!(energy(&m.at(0.2), &pts()).unwrap(), energy(&m.at(0.4), &pts()).unwrap());
    }

    #[test]
    fn zero_time_weights_reduce_to_spatial_model() {
        let spatial = MlpEbm::init(&[2, 8, 1], HiddenActivation::Gelu, 5).unwrap();
        let tm = TimeEbm::from_spatial(&spatial, TimeFeature::Scalar, 1.0).unwrap();
        let x = pts();
        let want = energy(&spatial, &x).unwrap();
        assert_eq!(energy(&tm.at(0.3), &x).unwrap(), want);
        assert_eq!(energy(&tm.at(0.8), &x).unwrap(), want);
    }

    #[test]
    fn checkpoint_text_roundtrip() {
        let m = MlpEbm::init(&[2, 7, 1], HiddenActivation::Silu, 9).unwrap();
        let c = Checkpoint::Mlp(m);
        assert_eq!(Checkpoint::from_text(&c.to_text()).unwrap(), c);
        let t = TimeEbm::init(1, &[4], TimeFeature::Sinusoidal { frequencies: 2 }, HiddenActivation::Gelu, 2.5, 1)
            .unwrap();
        let c = Checkpoint::Time(t);
        assert_eq!(Checkpoint::from_text(&c.to_text()).unwrap(), c);
        assert!(Checkpoint::from_text("nope").is_err());
        let truncated: String = c.to_text().lines().take(9).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
    }
}
