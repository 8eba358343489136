//! The two tuning mechanisms and their injection machinery: adjustable
//! norm-tuning (stage I) rewires every normalization site in the U-Net's
//! ResNet and attention blocks, and the visual adapter (stage II) inserts a
//! bottleneck module after selected cross-attention sub-blocks. Both are
//! exact identities at initialization, so injection never changes the
//! model's outputs until training moves the new parameters.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::layers::{NormKind, ParamBinder};
use crate::backbone::store::{ParamGroup, ParamId, ParamStore};
use crate::backbone::UNetModel;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const ADAPTER_KERNEL: usize = 5;
pub const BLOCK_COUNT: u8 = 7;

/// Bottleneck nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Visual adapter hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Bottleneck ratio r; the adapter projects C -> max(1, C/r).
    pub ratio: usize,
    pub activation: Activation,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            ratio: 4,
            activation: Activation::Gelu,
        }
    }
}

/// Which indexed attention blocks receive adapters. Indices follow the fixed
/// traversal order: encoder 1-3, middle 4, decoder 5-7.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct PlacementSpec {
    indices: BTreeSet<u8>,
}

impl Default for PlacementSpec {
    /// The first decoder block.
    fn default() -> Self {
        PlacementSpec {
            indices: BTreeSet::from([5]),
        }
    }
}

impl PlacementSpec {
    pub fn new(indices: impl IntoIterator<Item = u8>) -> Result<Self> {
        let indices: BTreeSet<u8> = indices.into_iter().collect();
        for &i in &indices {
            if !(1..=BLOCK_COUNT).contains(&i) {
                return Err(CoreError::Validation(format!(
                    "placement index {i} outside 1..={BLOCK_COUNT}"
                )));
            }
        }
        Ok(PlacementSpec { indices })
    }

    pub fn empty() -> Self {
        PlacementSpec {
            indices: BTreeSet::new(),
        }
    }

    pub fn all() -> Self {
        PlacementSpec {
            indices: (1..=BLOCK_COUNT).collect(),
        }
    }

    /// Parse forms like "5", "1-3", "1,2,6,7", "3-5,7".
    pub fn parse(text: &str) -> Result<Self> {
        let mut indices = BTreeSet::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let bounds: Vec<&str> = part.splitn(2, '-').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<u8>()
                    .map_err(|_| CoreError::Validation(format!("bad placement component '{s}'")))
            };
            match bounds.as_slice() {
                [single] => {
                    indices.insert(parse(single)?);
                }
                [lo, hi] => {
                    let (lo, hi) = (parse(lo)?, parse(hi)?);
                    if lo > hi {
                        return Err(CoreError::Validation(format!(
                            "placement range {lo}-{hi} is reversed"
                        )));
                    }
                    indices.extend(lo..=hi);
                }
                _ => unreachable!(),
            }
        }
        PlacementSpec::new(indices)
    }

    pub fn indices(&self) -> impl Iterator<Item = u8> + '_ {
        self.indices.iter().copied()
    }

    pub fn contains(&self, index: u8) -> bool {
        self.indices.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label(&self) -> String {
        self.indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl TryFrom<Vec<u8>> for PlacementSpec {
    type Error = CoreError;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        PlacementSpec::new(v)
    }
}

impl From<PlacementSpec> for Vec<u8> {
    fn from(p: PlacementSpec) -> Vec<u8> {
        p.indices.into_iter().collect()
    }
}

/// Stage selector for trainable-parameter enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Adjustable norm-tuning only.
    Stage1,
    /// Visual-adapter tuning only.
    Stage2,
    /// Both parameter sets in a single loop (ablation mode).
    OneStage,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage2 => write!(f, "stage2"),
            Stage::OneStage => write!(f, "one_stage"),
        }
    }
}

// ---------------------------------------------------------------------------
// Adjustable norm-tuning
// ---------------------------------------------------------------------------

/// Standalone parameter bundle for one adjustable norm site:
/// `out = gamma * Norm(z) + beta + gamma0 * z`.
#[derive(Clone, Debug)]
pub struct AdjustableNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Scalar `[1]` or per-channel `[C]` residual scale, initialized to 0.
    pub gamma0: Tensor,
    pub kind: NormKind,
    pub eps: f64,
}

impl AdjustableNormState {
    /// Identity-preserving initialization: gamma 1, beta 0, gamma0 0.
    pub fn identity(channels: usize, kind: NormKind, eps: f64, per_channel_gamma0: bool) -> Self {
        AdjustableNormState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            gamma0: Tensor::zeros(&[if per_channel_gamma0 { channels } else { 1 }]),
            kind,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// `gamma * Norm(z) + beta + gamma0 * z` with `Norm` chosen by `state.kind`.
/// `z` must have rank >= 2 with channels on axis 1.
pub fn adjustable_norm_forward(state: &AdjustableNormState, z: &Tensor) -> Result<Tensor> {
    if z.rank() < 2 {
        return Err(CoreError::Shape(format!(
            "adjustable norm needs rank >= 2 input, got {:?}",
            z.shape()
        )));
    }
    let channels = z.shape()[1];
    if state.gamma.len() != channels || state.beta.len() != channels {
        return Err(CoreError::Shape(format!(
            "norm state holds {} channels but input has {channels}",
            state.gamma.len()
        )));
    }
    if state.gamma0.len() != 1 && state.gamma0.len() != channels {
        return Err(CoreError::Shape(format!(
            "gamma0 length {} is neither scalar nor per-channel",
            state.gamma0.len()
        )));
    }
    if let NormKind::Group { groups } = state.kind {
        if groups == 0 || channels % groups != 0 {
            return Err(CoreError::Shape(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
    }
    if !(state.eps.is_finite() && state.eps >= 0.0) {
        return Err(CoreError::Validation(format!(
            "norm epsilon must be non-negative, got {}",
            state.eps
        )));
    }

    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let gamma = g.constant(state.gamma.clone());
    let beta = g.constant(state.beta.clone());
    let gamma0 = g.constant(state.gamma0.clone());
    let out = adjustable_norm_graph(&mut g, zv, gamma, beta, Some(gamma0), state.kind, state.eps);
    Ok(g.value(out).clone())
}

/// Shared graph construction for norm sites; `gamma0` of length 1 broadcasts
/// as a scalar. Passing `None` yields the plain affine norm.
pub(crate) fn adjustable_norm_graph(
    g: &mut Graph,
    z: Var,
    gamma: Var,
    beta: Var,
    gamma0: Option<Var>,
    kind: NormKind,
    eps: f64,
) -> Var {
    let normed = match kind {
        NormKind::Group { groups } => g.group_norm(z, groups, eps),
        NormKind::Layer => g.chan_norm(z, eps),
    };
    let scaled = g.ch_scale(normed, gamma);
    let affine = g.ch_bias(scaled, beta);
    match gamma0 {
        None => affine,
        Some(g0) => {
            let residual = if g.value(g0).len() == 1 {
                g.scale_var(z, g0)
            } else {
                g.ch_scale(z, g0)
            };
            g.add(affine, residual)
        }
    }
}

// ---------------------------------------------------------------------------
// Visual adapter
// ---------------------------------------------------------------------------

/// Standalone parameter bundle for one visual adapter.
///
/// Forward: `z = z0 + Up(act(f(Down(w0 * LN(z0)))))` with
/// `f(x) = x + dw5x5(x)` applied inside the bottleneck.
#[derive(Clone, Debug)]
pub struct VisualAdapterState {
    /// Learnable scale on the layer-norm output, initialized to 1.
    pub w0: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// Down projection `[C, Cb]` plus bias `[Cb]`.
    pub w_down: Tensor,
    pub b_down: Tensor,
    /// One 5x5 filter per bottleneck channel, `[Cb, 5, 5]`.
    pub dw_kernel: Tensor,
    /// Up projection `[Cb, C]` plus bias `[C]`; zero-initialized.
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub activation: Activation,
    pub eps: f64,
}

impl VisualAdapterState {
    /// Fresh adapter: small random down projection and depth-wise kernel,
    /// zero up projection so the module is the identity at insertion.
    pub fn init(channels: usize, cfg: &AdapterConfig, eps: f64, rng: &mut impl Rng) -> Self {
        let cb = bottleneck_channels(channels, cfg.ratio);
        VisualAdapterState {
            w0: Tensor::scalar(1.0),
            ln_gamma: Tensor::full(&[channels], 1.0),
            ln_beta: Tensor::zeros(&[channels]),
            w_down: Tensor::randn(&[channels, cb], (1.0 / channels as f64).sqrt(), rng),
            b_down: Tensor::zeros(&[cb]),
            dw_kernel: Tensor::randn(
                &[cb, ADAPTER_KERNEL, ADAPTER_KERNEL],
                (1.0 / (ADAPTER_KERNEL * ADAPTER_KERNEL) as f64).sqrt(),
                rng,
            ),
            w_up: Tensor::zeros(&[cb, channels]),
            b_up: Tensor::zeros(&[channels]),
            activation: cfg.activation,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.ln_gamma.len()
    }

    pub fn bottleneck(&self) -> usize {
        self.dw_kernel.shape()[0]
    }
}

pub fn bottleneck_channels(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

/// Apply one visual adapter to `z0` of shape `[F, C, h, w]`.
pub fn adapter_forward(state: &VisualAdapterState, z0: &Tensor) -> Result<Tensor> {
    if z0.rank() != 4 {
        return Err(CoreError::Shape(format!(
            "adapter input must be [F, C, h, w], got {:?}",
            z0.shape()
        )));
    }
    let channels = z0.shape()[1];
    if state.channels() != channels {
        return Err(CoreError::Shape(format!(
            "adapter built for {} channels, input has {channels}",
            state.channels()
        )));
    }
    let mut g = Graph::new();
    let z = g.constant(z0.clone());
    let vars = AdapterVars {
        w0: g.constant(state.w0.clone()),
        ln_gamma: g.constant(state.ln_gamma.clone()),
        ln_beta: g.constant(state.ln_beta.clone()),
        w_down: g.constant(state.w_down.clone()),
        b_down: g.constant(state.b_down.clone()),
        dw_kernel: g.constant(state.dw_kernel.clone()),
        w_up: g.constant(state.w_up.clone()),
        b_up: g.constant(state.b_up.clone()),
    };
    let out = adapter_graph(&mut g, z, &vars, state.activation, state.eps);
    Ok(g.value(out).clone())
}

pub(crate) struct AdapterVars {
    pub w0: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w_down: Var,
    pub b_down: Var,
    pub dw_kernel: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Graph form of the adapter used both by the standalone op and by injected
/// model sites.
pub(crate) fn adapter_graph(
    g: &mut Graph,
    z0: Var,
    vars: &AdapterVars,
    activation: Activation,
    eps: f64,
) -> Var {
    let shape = g.value(z0).shape().to_vec();
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cb = g.value(vars.w_down).shape()[1];

    // Scaled layer norm.
    let normed = g.chan_norm(z0, eps);
    let normed = g.ch_scale(normed, vars.ln_gamma);
    let normed = g.ch_bias(normed, vars.ln_beta);
    let normed = g.scale_var(normed, vars.w0);

    // Down projection per position.
    let tokens = g.permute(normed, &[0, 2, 3, 1]);
    let tokens = g.reshape(tokens, &[f * h * w, c]);
    let down = g.matmul(tokens, vars.w_down);
    let down = g.ch_bias(down, vars.b_down);
    let down = g.reshape(down, &[f, h, w, cb]);
    let down = g.permute(down, &[0, 3, 1, 2]);

    // Residual depth-wise 5x5 inside the bottleneck.
    let conv = g.dw_conv2d(down, vars.dw_kernel, ADAPTER_KERNEL / 2);
    let pre = g.add(down, conv);
    let act = activation.apply(g, pre);

    // Up projection and residual connection.
    let act = g.permute(act, &[0, 2, 3, 1]);
    let act = g.reshape(act, &[f * h * w, cb]);
    let up = g.matmul(act, vars.w_up);
    let up = g.ch_bias(up, vars.b_up);
    let up = g.reshape(up, &[f, h, w, c]);
    let up = g.permute(up, &[0, 3, 1, 2]);
    g.add(z0, up)
}

/// Pre-activation bottleneck map `f(Down(w0 * LN(z0)))` of the adapter,
/// exposed for the depth-wise purity check.
pub fn adapter_preactivation(state: &VisualAdapterState, z0: &Tensor) -> Result<Tensor> {
    if z0.rank() != 4 || z0.shape()[1] != state.channels() {
        return Err(CoreError::Shape(format!(
            "adapter input must be [F, {}, h, w], got {:?}",
            state.channels(),
            z0.shape()
        )));
    }
    let shape = z0.shape().to_vec();
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cb = state.bottleneck();
    let mut g = Graph::new();
    let z = g.constant(z0.clone());
    let ln_gamma = g.constant(state.ln_gamma.clone());
    let ln_beta = g.constant(state.ln_beta.clone());
    let w0 = g.constant(state.w0.clone());
    let w_down = g.constant(state.w_down.clone());
    let b_down = g.constant(state.b_down.clone());
    let dw = g.constant(state.dw_kernel.clone());
    let normed = g.chan_norm(z, state.eps);
    let normed = g.ch_scale(normed, ln_gamma);
    let normed = g.ch_bias(normed, ln_beta);
    let normed = g.scale_var(normed, w0);
    let tokens = g.permute(normed, &[0, 2, 3, 1]);
    let tokens = g.reshape(tokens, &[f * h * w, c]);
    let down = g.matmul(tokens, w_down);
    let down = g.ch_bias(down, b_down);
    let down = g.reshape(down, &[f, h, w, cb]);
    let down = g.permute(down, &[0, 3, 1, 2]);
    let conv = g.dw_conv2d(down, dw, ADAPTER_KERNEL / 2);
    let pre = g.add(down, conv);
    Ok(g.value(pre).clone())
}

// ---------------------------------------------------------------------------
// Injection into a built model
// ---------------------------------------------------------------------------

/// Adapter wiring inside the model: store-backed parameter ids.
pub(crate) struct VisualAdapterLayer {
    pub w0: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub dw_kernel: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub activation: Activation,
    pub eps: f64,
}

impl VisualAdapterLayer {
    pub(crate) fn from_state(
        store: &mut ParamStore,
        name: &str,
        state: VisualAdapterState,
    ) -> Self {
        let mut p = |suffix: &str, t: Tensor| {
            store.push(format!("{name}.{suffix}"), t, ParamGroup::Adapter)
        };
        VisualAdapterLayer {
            w0: p("w0", state.w0),
            ln_gamma: p("ln_gamma", state.ln_gamma),
            ln_beta: p("ln_beta", state.ln_beta),
            w_down: p("w_down", state.w_down),
            b_down: p("b_down", state.b_down),
            dw_kernel: p("dw_kernel", state.dw_kernel),
            w_up: p("w_up", state.w_up),
            b_up: p("b_up", state.b_up),
            activation: state.activation,
            eps: state.eps,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, z0: Var) -> Var {
        let vars = AdapterVars {
            w0: pb.var(g, self.w0),
            ln_gamma: pb.var(g, self.ln_gamma),
            ln_beta: pb.var(g, self.ln_beta),
            w_down: pb.var(g, self.w_down),
            b_down: pb.var(g, self.b_down),
            dw_kernel: pb.var(g, self.dw_kernel),
            w_up: pb.var(g, self.w_up),
            b_up: pb.var(g, self.b_up),
        };
        adapter_graph(g, z0, &vars, self.activation, self.eps)
    }
}

/// Replace every normalization site in ResNet and attention blocks with an
/// adjustable site: gamma/beta are copied into tunable parameters and a
/// gamma0 residual scale (initialized to 0) is added. Returns the number of
/// replaced sites.
pub fn inject_norm_tuning(model: &mut UNetModel) -> Result<usize> {
    if model.norm_injected() {
        return Err(CoreError::State(
            "norm tuning already injected into this model".into(),
        ));
    }
    let count = model.inject_norm_sites();
    Ok(count)
}

/// Insert one visual adapter immediately after the cross-attention sub-block
/// of each indexed attention block. Empty placements are a no-op. Returns
/// the number of adapters inserted.
pub fn inject_adapters(
    model: &mut UNetModel,
    placement: &PlacementSpec,
    cfg: &AdapterConfig,
) -> Result<usize> {
    if cfg.ratio == 0 {
        return Err(CoreError::Config("adapter ratio must be positive".into()));
    }
    if model.adapters_injected() {
        return Err(CoreError::State(
            "adapters already injected into this model".into(),
        ));
    }
    if placement.is_empty() {
        return Ok(0);
    }
    model.inject_adapter_layers(placement, cfg);
    Ok(placement.len())
}

/// Enumerate the parameters a stage trains; everything else stays frozen.
pub fn trainable_parameters(model: &UNetModel, stage: Stage) -> Result<Vec<ParamId>> {
    let need_norms = matches!(stage, Stage::Stage1 | Stage::OneStage);
    let need_adapters = matches!(stage, Stage::Stage2 | Stage::OneStage);
    if need_norms && !model.norm_injected() {
        return Err(CoreError::State(format!(
            "{stage} requires norm tuning to be injected first"
        )));
    }
    if need_adapters && !model.adapters_injected() {
        return Err(CoreError::State(format!(
            "{stage} requires adapters to be injected first"
        )));
    }
    let store = model.store();
    let mut ids = Vec::new();
    if need_norms {
        ids.extend(store.ids_in_group(ParamGroup::Norm));
    }
    if need_adapters {
        ids.extend(store.ids_in_group(ParamGroup::Adapter));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn layer_norm_fixed_point() {
        // Unit-variance zero-mean input is a fixed point with eps = 0.
        let state = AdjustableNormState {
            gamma: Tensor::full(&[2], 1.0),
            beta: Tensor::zeros(&[2]),
            gamma0: Tensor::zeros(&[1]),
            kind: NormKind::Layer,
            eps: 0.0,
        };
        let z = Tensor::from_vec(&[1, 2], vec![-1.0, 1.0]);
        let out = adjustable_norm_forward(&state, &z).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn gamma0_adds_scaled_input() {
        let state = AdjustableNormState {
            gamma: Tensor::full(&[2], 1.0),
            beta: Tensor::zeros(&[2]),
            gamma0: Tensor::scalar(0.5),
            kind: NormKind::Layer,
            eps: 0.0,
        };
        let z = Tensor::from_vec(&[1, 2], vec![-1.0, 1.0]);
        let out = adjustable_norm_forward(&state, &z).unwrap();
        let expected = Tensor::from_vec(&[1, 2], vec![-1.5, 1.5]);
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn norm_of_per_channel_constant_is_zero() {
        // Each channel constant over its normalized region -> Norm(z) = 0.
        let state = AdjustableNormState::identity(4, NormKind::Group { groups: 4 }, 1e-5, false);
        let mut z = Tensor::zeros(&[2, 4, 3, 3]);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = ((i / 9) % 4) as f64 + 1.0;
        }
        let out = adjustable_norm_forward(&state, &z).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn norm_channel_mismatch_is_shape_error() {
        let state = AdjustableNormState::identity(3, NormKind::Layer, 1e-5, false);
        let z = Tensor::zeros(&[1, 4, 2, 2]);
        assert!(matches!(
            adjustable_norm_forward(&state, &z),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn adapter_zero_up_projection_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let state = VisualAdapterState::init(8, &AdapterConfig::default(), 1e-5, &mut rng);
        let z0 = randn(&[2, 8, 4, 4], 4);
        let out = adapter_forward(&state, &z0).unwrap();
        assert!(out.bit_eq(&z0), "zero W_up must make the adapter exact identity");
    }

    #[test]
    fn adapter_maps_zero_to_zero_without_biases() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut state = VisualAdapterState::init(8, &AdapterConfig::default(), 1e-5, &mut rng);
        // Give the up projection weight mass but keep all shifts at zero.
        state.w_up = randn(&[state.bottleneck(), 8], 6);
        state.ln_beta = Tensor::zeros(&[8]);
        let z0 = Tensor::zeros(&[2, 8, 4, 4]);
        let out = adapter_forward(&state, &z0).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn adapter_channel_mismatch_is_shape_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let state = VisualAdapterState::init(8, &AdapterConfig::default(), 1e-5, &mut rng);
        assert!(matches!(
            adapter_forward(&state, &Tensor::zeros(&[2, 6, 4, 4])),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn depthwise_kernel_shape_is_one_filter_per_bottleneck_channel() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let state = VisualAdapterState::init(32, &AdapterConfig::default(), 1e-5, &mut rng);
        assert_eq!(state.dw_kernel.shape(), &[8, 5, 5]);
    }

    #[test]
    fn placement_parse_and_validation() {
        assert_eq!(PlacementSpec::parse("5").unwrap(), PlacementSpec::default());
        assert_eq!(
            PlacementSpec::parse("1-7").unwrap(),
            PlacementSpec::all()
        );
        let p = PlacementSpec::parse("1,2,6,7").unwrap();
        assert_eq!(p.indices().collect::<Vec<_>>(), vec![1, 2, 6, 7]);
        assert!(PlacementSpec::parse("9").is_err());
        assert!(PlacementSpec::parse("0").is_err());
        assert!(PlacementSpec::new([3, 9]).is_err());
    }
}
