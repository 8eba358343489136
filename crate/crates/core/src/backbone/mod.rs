//! A compact latent-diffusion video U-Net: three encoder attention blocks,
//! one middle block, three decoder attention blocks, each combining a ResNet
//! sub-block with spatial self-attention, text cross-attention and temporal
//! attention over the frame axis. The seven attention blocks are indexable
//! 1..=7 in fixed traversal order for adapter placement.

pub mod layers;
pub mod store;

mod autoenc;
mod text;

pub use autoenc::{decode, encode, LatentVideo};
pub use text::{ConditionEmbedding, TextConditioner};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::peft::{AdapterConfig, PlacementSpec, VisualAdapterLayer, VisualAdapterState};
use crate::tensor::Tensor;
use crate::util::mix;

use layers::{AttentionLayer, AttnKind, Conv2dLayer, LinearLayer, NormKind, NormSite, ParamBinder, ResBlock};
use store::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Latent channels C_l the U-Net consumes and produces.
    pub latent_channels: usize,
    /// Spatial reduction factor d of the patchify autoencoder (power of two).
    pub reduction: usize,
    /// Channel width of the first encoder level.
    pub base_width: usize,
    /// Per-level multipliers on `base_width` for the three levels.
    pub channel_mults: [usize; 3],
    /// Attention heads; must divide every level width.
    pub heads: usize,
    /// Text-condition embedding dimension (cross-attention key/value width).
    pub cross_dim: usize,
    /// Token budget of the text conditioner.
    pub max_text_tokens: usize,
    /// Width of the timestep embedding MLP.
    pub time_dim: usize,
    /// Norm variant at ResNet sites.
    pub resnet_norm: NormKind,
    /// Norm variant at attention sites.
    pub attention_norm: NormKind,
    pub norm_eps: f64,
    /// Learn gamma0 per channel instead of one scalar per site.
    pub gamma0_per_channel: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            latent_channels: 4,
            reduction: 8,
            base_width: 32,
            channel_mults: [1, 2, 2],
            heads: 4,
            cross_dim: 32,
            max_text_tokens: 8,
            time_dim: 64,
            resnet_norm: NormKind::Group { groups: 4 },
            attention_norm: NormKind::Layer,
            norm_eps: 1e-5,
            gamma0_per_channel: false,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn widths(&self) -> [usize; 3] {
        [
            self.base_width * self.channel_mults[0],
            self.base_width * self.channel_mults[1],
            self.base_width * self.channel_mults[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(CoreError::Config("latent_channels must be positive".into()));
        }
        if self.reduction == 0 || !self.reduction.is_power_of_two() {
            return Err(CoreError::Config(format!(
                "reduction must be a power of two, got {}",
                self.reduction
            )));
        }
        if self.base_width == 0 || self.channel_mults.iter().any(|&m| m == 0) {
            return Err(CoreError::Config("channel widths must be positive".into()));
        }
        if self.heads == 0 || self.widths().iter().any(|w| w % self.heads != 0) {
            return Err(CoreError::Config(format!(
                "heads {} must divide every level width {:?}",
                self.heads,
                self.widths()
            )));
        }
        if self.cross_dim == 0 || self.max_text_tokens == 0 || self.time_dim == 0 {
            return Err(CoreError::Config(
                "cross_dim, max_text_tokens and time_dim must be positive".into(),
            ));
        }
        if self.base_width % 2 != 0 {
            return Err(CoreError::Config("base_width must be even".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(CoreError::Config("norm_eps must be non-negative".into()));
        }
        for kind in [self.resnet_norm, self.attention_norm] {
            if let NormKind::Group { groups } = kind {
                if groups == 0 {
                    return Err(CoreError::Config("norm groups must be positive".into()));
                }
                for w in self.widths() {
                    if w % groups != 0 {
                        return Err(CoreError::Config(format!(
                            "group norm with {groups} groups does not divide width {w}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration.
    pub fn content_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        crate::util::fnv1a64(text.as_bytes())
    }
}

/// Auxiliary structural condition injected into decoder blocks during
/// sampling (the slot a pretrained control network would fill).
pub trait ConditionHook {
    /// Residual added to the output of decoder block `index` (5..=7).
    /// Returning `None` leaves the block untouched.
    fn residual(&self, index: u8, shape: &[usize]) -> Option<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Encoder(usize),
    Middle,
    Decoder(usize),
}

/// Handle onto one of the seven indexed attention blocks.
#[derive(Clone, Debug)]
pub struct BlockHandle {
    pub index: u8,
    pub role: BlockRole,
    pub channels: usize,
    pub label: String,
}

pub(crate) struct AttentionBlock {
    pub res: ResBlock,
    pub self_attn: AttentionLayer,
    pub cross_attn: AttentionLayer,
    pub temporal_attn: AttentionLayer,
    pub adapter: Option<VisualAdapterLayer>,
    pub channels: usize,
    pub label: String,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        label: &str,
        ci: usize,
        co: usize,
        cfg: &BackboneConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        AttentionBlock {
            res: ResBlock::new(
                store,
                &format!("{label}.res"),
                ci,
                co,
                cfg.time_dim,
                cfg.resnet_norm,
                cfg.norm_eps,
                rng,
            ),
            self_attn: AttentionLayer::new(
                store,
                &format!("{label}.self_attn"),
                co,
                co,
                cfg.heads,
                AttnKind::SelfSpatial,
                cfg.attention_norm,
                cfg.norm_eps,
                rng,
            ),
            cross_attn: AttentionLayer::new(
                store,
                &format!("{label}.cross_attn"),
                co,
                cfg.cross_dim,
                cfg.heads,
                AttnKind::CrossText,
                cfg.attention_norm,
                cfg.norm_eps,
                rng,
            ),
            temporal_attn: AttentionLayer::new(
                store,
                &format!("{label}.temporal_attn"),
                co,
                co,
                cfg.heads,
                AttnKind::Temporal,
                cfg.attention_norm,
                cfg.norm_eps,
                rng,
            ),
            adapter: None,
            channels: co,
            label: label.to_string(),
        }
    }

    fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, x: Var, temb: Var, cond: Var) -> Var {
        let x = self.res.forward(g, pb, x, temb);
        let x = self.self_attn.forward(g, pb, x, None);
        let x = self.cross_attn.forward(g, pb, x, Some(cond));
        let x = match &self.adapter {
            Some(adapter) => adapter.forward(g, pb, x),
            None => x,
        };
        self.temporal_attn.forward(g, pb, x, None)
    }

    fn norm_sites_mut(&mut self) -> Vec<&mut NormSite> {
        vec![
            &mut self.res.norm1,
            &mut self.res.norm2,
            &mut self.self_attn.norm,
            &mut self.cross_attn.norm,
            &mut self.temporal_attn.norm,
        ]
    }
}

pub struct UNetModel {
    config: BackboneConfig,
    store: ParamStore,
    time_fc1: LinearLayer,
    time_fc2: LinearLayer,
    stem: Conv2dLayer,
    enc: Vec<AttentionBlock>,
    /// Channel-change 1x1 convs between levels; spatial pooling applies
    /// only when the running resolution allows it.
    downs: Vec<Conv2dLayer>,
    mid: AttentionBlock,
    ups: Vec<Conv2dLayer>,
    dec: Vec<AttentionBlock>,
    head_norm: NormSite,
    head: Conv2dLayer,
    conditioner: TextConditioner,
    norm_injected: bool,
    adapter_placement: Option<PlacementSpec>,
}

/// Build the U-Net from a validated config; deterministic for a fixed seed.
pub fn build_unet(config: &BackboneConfig) -> Result<UNetModel> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let [w1, w2, w3] = config.widths();
    let sin_dim = config.base_width;

    let time_fc1 = LinearLayer::new(
        &mut store,
        "time.fc1",
        sin_dim,
        config.time_dim,
        (1.0 / sin_dim as f64).sqrt(),
        &mut rng,
    );
    let time_fc2 = LinearLayer::new(
        &mut store,
        "time.fc2",
        config.time_dim,
        config.time_dim,
        (1.0 / config.time_dim as f64).sqrt(),
        &mut rng,
    );
    let stem = Conv2dLayer::new(
        &mut store,
        "stem",
        config.latent_channels,
        w1,
        3,
        1,
        (2.0 / (config.latent_channels as f64 * 9.0)).sqrt(),
        &mut rng,
    );

    let enc = vec![
        AttentionBlock::new(&mut store, "enc1", w1, w1, config, &mut rng),
        AttentionBlock::new(&mut store, "enc2", w2, w2, config, &mut rng),
        AttentionBlock::new(&mut store, "enc3", w3, w3, config, &mut rng),
    ];
    let downs = vec![
        Conv2dLayer::new(&mut store, "down1", w1, w2, 1, 0, (1.0 / w1 as f64).sqrt(), &mut rng),
        Conv2dLayer::new(&mut store, "down2", w2, w3, 1, 0, (1.0 / w2 as f64).sqrt(), &mut rng),
    ];
    let mid = AttentionBlock::new(&mut store, "mid", w3, w3, config, &mut rng);
    let ups = vec![
        Conv2dLayer::new(&mut store, "up2", w3, w2, 1, 0, (1.0 / w3 as f64).sqrt(), &mut rng),
        Conv2dLayer::new(&mut store, "up1", w2, w1, 1, 0, (1.0 / w2 as f64).sqrt(), &mut rng),
    ];
    let dec = vec![
        AttentionBlock::new(&mut store, "dec1", 2 * w3, w3, config, &mut rng),
        AttentionBlock::new(&mut store, "dec2", 2 * w2, w2, config, &mut rng),
        AttentionBlock::new(&mut store, "dec3", 2 * w1, w1, config, &mut rng),
    ];
    let head_norm = NormSite::new(&mut store, "head.norm", w1, config.resnet_norm, config.norm_eps);
    // Small but non-zero init: tuning only norm/adapter parameters must be
    // able to move the output, so the head cannot start dead.
    let head = Conv2dLayer::new(
        &mut store,
        "head",
        w1,
        config.latent_channels,
        3,
        1,
        0.02,
        &mut rng,
    );

    Ok(UNetModel {
        conditioner: TextConditioner::new(config.cross_dim, config.max_text_tokens),
        config: config.clone(),
        store,
        time_fc1,
        time_fc2,
        stem,
        enc,
        downs,
        mid,
        ups,
        dec,
        head_norm,
        head,
        norm_injected: false,
        adapter_placement: None,
    })
}

impl UNetModel {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn norm_injected(&self) -> bool {
        self.norm_injected
    }

    pub fn adapters_injected(&self) -> bool {
        self.adapter_placement.is_some()
    }

    pub fn adapter_placement(&self) -> Option<&PlacementSpec> {
        self.adapter_placement.as_ref()
    }

    /// Total scalar parameter count across all groups.
    pub fn parameter_count(&self) -> usize {
        let ids: Vec<ParamId> = self.store.ids().collect();
        self.store.scalar_count(&ids)
    }

    pub fn group_parameter_count(&self, group: ParamGroup) -> usize {
        self.store.scalar_count(&self.store.ids_in_group(group))
    }

    /// Embed a text prompt with the model's deterministic conditioner.
    pub fn embed_text(&self, text: &str) -> ConditionEmbedding {
        self.conditioner.embed(text)
    }

    /// The seven attention blocks in fixed traversal order: encoder 1..3,
    /// middle 4, decoder 5..7.
    pub fn list_attention_blocks(&self) -> Vec<BlockHandle> {
        let mut handles = Vec::with_capacity(7);
        for (i, b) in self.enc.iter().enumerate() {
            handles.push(BlockHandle {
                index: (i + 1) as u8,
                role: BlockRole::Encoder(i),
                channels: b.channels,
                label: b.label.clone(),
            });
        }
        handles.push(BlockHandle {
            index: 4,
            role: BlockRole::Middle,
            channels: self.mid.channels,
            label: self.mid.label.clone(),
        });
        for (i, b) in self.dec.iter().enumerate() {
            handles.push(BlockHandle {
                index: (i + 5) as u8,
                role: BlockRole::Decoder(i),
                channels: b.channels,
                label: b.label.clone(),
            });
        }
        handles
    }

    fn block_mut(&mut self, index: u8) -> &mut AttentionBlock {
        match index {
            1..=3 => &mut self.enc[(index - 1) as usize],
            4 => &mut self.mid,
            5..=7 => &mut self.dec[(index - 5) as usize],
            _ => unreachable!("block index validated by PlacementSpec"),
        }
    }

    /// Swap every block norm site onto tunable copies; returns site count.
    pub(crate) fn inject_norm_sites(&mut self) -> usize {
        let per_channel = self.config.gamma0_per_channel;
        let store = &mut self.store;
        let mut count = 0;
        for block in self
            .enc
            .iter_mut()
            .chain(std::iter::once(&mut self.mid))
            .chain(self.dec.iter_mut())
        {
            for site in block.norm_sites_mut() {
                let gamma = store.value(site.gamma).clone();
                let beta = store.value(site.beta).clone();
                let channels = gamma.len();
                let label = site.label.clone();
                site.gamma = store.push(format!("{label}.tuned_gamma"), gamma, ParamGroup::Norm);
                site.beta = store.push(format!("{label}.tuned_beta"), beta, ParamGroup::Norm);
                let g0 = Tensor::zeros(&[if per_channel { channels } else { 1 }]);
                site.gamma0 = Some(store.push(format!("{label}.gamma0"), g0, ParamGroup::Norm));
                count += 1;
            }
        }
        self.norm_injected = true;
        count
    }

    /// Create adapters at the placement's blocks. Initialization is seeded
    /// per block index so a placement's adapters do not depend on which other
    /// blocks are selected.
    pub(crate) fn inject_adapter_layers(&mut self, placement: &PlacementSpec, cfg: &AdapterConfig) {
        for index in placement.indices() {
            let seed = mix(self.config.seed, 0x5eed_ada9 + index as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let eps = self.config.norm_eps;
            let block = self.block_mut(index);
            let state = VisualAdapterState::init(block.channels, cfg, eps, &mut rng);
            let label = format!("{}.adapter", block.label);
            let layer = VisualAdapterLayer::from_state(&mut self.store, &label, state);
            self.block_mut(index).adapter = Some(layer);
        }
        self.adapter_placement = Some(placement.clone());
    }

    /// Graph-level forward; binds parameters through `pb` so callers can
    /// read their gradients afterwards.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        pb: &mut ParamBinder,
        z: Var,
        t: usize,
        cond: Var,
        hook: Option<&dyn ConditionHook>,
    ) -> Var {
        let sin = timestep_embedding(t, self.config.base_width);
        let sin = g.constant(sin);
        let temb = self.time_fc1.forward(g, pb, sin);
        let temb = g.silu(temb);
        let temb = self.time_fc2.forward(g, pb, temb);

        let x = self.stem.forward(g, pb, z);

        // Encoder.
        let e1 = self.enc[0].forward(g, pb, x, temb, cond);
        let (x, pooled1) = pool_if_possible(g, e1);
        let x = self.downs[0].forward(g, pb, x);
        let e2 = self.enc[1].forward(g, pb, x, temb, cond);
        let (x, pooled2) = pool_if_possible(g, e2);
        let x = self.downs[1].forward(g, pb, x);
        let e3 = self.enc[2].forward(g, pb, x, temb, cond);

        let m = self.mid.forward(g, pb, e3, temb, cond);

        // Decoder with skip connections; hook residuals attach to block outputs.
        let cat = g.concat_ch(m, e3);
        let mut d = self.dec[0].forward(g, pb, cat, temb, cond);
        d = apply_hook(g, d, 5, hook);
        let mut x = self.ups[0].forward(g, pb, d);
        if pooled2 {
            x = g.upsample_nearest2x(x);
        }
        let cat = g.concat_ch(x, e2);
        let mut d = self.dec[1].forward(g, pb, cat, temb, cond);
        d = apply_hook(g, d, 6, hook);
        let mut x = self.ups[1].forward(g, pb, d);
        if pooled1 {
            x = g.upsample_nearest2x(x);
        }
        let cat = g.concat_ch(x, e1);
        let mut d = self.dec[2].forward(g, pb, cat, temb, cond);
        d = apply_hook(g, d, 7, hook);

        let out = self.head_norm.forward(g, pb, d);
        let out = g.silu(out);
        self.head.forward(g, pb, out)
    }

    /// Validate inputs and run a pure forward pass.
    pub fn predict_noise(
        &self,
        latent: &LatentVideo,
        t: usize,
        cond: &ConditionEmbedding,
        hook: Option<&dyn ConditionHook>,
    ) -> Result<Tensor> {
        let z = &latent.latents;
        if z.rank() != 4 {
            return Err(CoreError::Shape(format!(
                "latent must be [F, C, h, w], got {:?}",
                z.shape()
            )));
        }
        if z.shape()[1] != self.config.latent_channels {
            return Err(CoreError::Shape(format!(
                "latent has {} channels, model expects {}",
                z.shape()[1],
                self.config.latent_channels
            )));
        }
        if !z.all_finite() {
            return Err(CoreError::Numeric("non-finite latent input".into()));
        }
        if cond.tokens.shape()[1] != self.config.cross_dim {
            return Err(CoreError::Shape(format!(
                "condition dimension {} does not match cross_dim {}",
                cond.tokens.shape()[1],
                self.config.cross_dim
            )));
        }
        let mut g = Graph::new();
        let mut pb = ParamBinder::new(&self.store);
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.tokens.clone());
        let out = self.forward_graph(&mut g, &mut pb, zv, t, cv, hook);
        Ok(g.value(out).clone())
    }
}

/// Free-function form of the forward pass, matching the operation map.
pub fn unet_forward(
    model: &UNetModel,
    latent: &LatentVideo,
    t: usize,
    cond: &ConditionEmbedding,
) -> Result<Tensor> {
    model.predict_noise(latent, t, cond, None)
}

fn apply_hook(g: &mut Graph, x: Var, index: u8, hook: Option<&dyn ConditionHook>) -> Var {
    let Some(hook) = hook else { return x };
    let shape = g.value(x).shape().to_vec();
    match hook.residual(index, &shape) {
        None => x,
        Some(r) => {
            assert_eq!(r.shape(), shape.as_slice(), "hook residual shape mismatch");
            let rv = g.constant(r);
            g.add(x, rv)
        }
    }
}

fn pool_if_possible(g: &mut Graph, x: Var) -> (Var, bool) {
    let shape = g.value(x).shape();
    let (h, w) = (shape[2], shape[3]);
    if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 {
        (g.avg_pool2x(x), true)
    } else {
        (x, false)
    }
}

/// Sinusoidal embedding of an integer timestep, `[1, dim]`.
fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(&[1, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> BackboneConfig {
        BackboneConfig {
            latent_channels: 4,
            base_width: 8,
            channel_mults: [1, 2, 2],
            heads: 2,
            cross_dim: 8,
            time_dim: 16,
            resnet_norm: NormKind::Group { groups: 2 },
            ..Default::default()
        }
    }

    fn toy_latent(f: usize, h: usize, w: usize) -> LatentVideo {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        LatentVideo {
            latents: Tensor::randn(&[f, 4, h, w], 1.0, &mut rng),
            timestep: None,
        }
    }

    #[test]
    fn default_model_has_seven_attention_blocks() {
        let model = build_unet(&BackboneConfig::default()).unwrap();
        let handles = model.list_attention_blocks();
        assert_eq!(handles.len(), 7);
        assert_eq!(handles[4].index, 5);
        assert_eq!(handles[4].role, BlockRole::Decoder(0));
        assert_eq!(handles[4].label, "dec1");
        let again = model.list_attention_blocks();
        assert_eq!(
            handles.iter().map(|h| h.index).collect::<Vec<_>>(),
            again.iter().map(|h| h.index).collect::<Vec<_>>()
        );
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let cfg = toy_config();
        let a = build_unet(&cfg).unwrap();
        let b = build_unet(&cfg).unwrap();
        assert_eq!(a.store().len(), b.store().len());
        for (ia, ib) in a.store().ids().zip(b.store().ids()) {
            assert!(a.store().value(ia).bit_eq(b.store().value(ib)));
        }
        let other = build_unet(&BackboneConfig {
            seed: 1,
            ..cfg
        })
        .unwrap();
        assert_ne!(
            a.store().group_checksum(ParamGroup::Backbone),
            other.store().group_checksum(ParamGroup::Backbone)
        );
    }

    #[test]
    fn forward_preserves_shape_and_is_pure() {
        let model = build_unet(&toy_config()).unwrap();
        let latent = toy_latent(3, 4, 4);
        let cond = model.embed_text("a cat on a mat");
        let out1 = unet_forward(&model, &latent, 17, &cond).unwrap();
        let out2 = unet_forward(&model, &latent, 17, &cond).unwrap();
        assert_eq!(out1.shape(), latent.latents.shape());
        assert!(out1.all_finite());
        assert!(out1.bit_eq(&out2), "forward must be pure");
    }

    #[test]
    fn forward_handles_tiny_and_odd_spatial_dims() {
        let model = build_unet(&toy_config()).unwrap();
        for (h, w) in [(2, 2), (1, 1), (3, 5), (4, 2)] {
            let latent = toy_latent(2, h, w);
            let cond = model.embed_text("x");
            let out = unet_forward(&model, &latent, 0, &cond).unwrap();
            assert_eq!(out.shape(), latent.latents.shape(), "at {h}x{w}");
        }
    }

    #[test]
    fn zero_latent_gives_finite_output() {
        let model = build_unet(&toy_config()).unwrap();
        let latent = LatentVideo {
            latents: Tensor::zeros(&[2, 4, 4, 4]),
            timestep: None,
        };
        let cond = model.embed_text("");
        let out = unet_forward(&model, &latent, 0, &cond).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn shape_and_numeric_errors() {
        let model = build_unet(&toy_config()).unwrap();
        let cond = model.embed_text("x");
        let bad = LatentVideo {
            latents: Tensor::zeros(&[2, 3, 4, 4]),
            timestep: None,
        };
        assert!(matches!(
            unet_forward(&model, &bad, 0, &cond),
            Err(CoreError::Shape(_))
        ));
        let mut nan = toy_latent(2, 4, 4);
        nan.latents.data_mut()[0] = f64::NAN;
        assert!(matches!(
            unet_forward(&model, &nan, 0, &cond),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_reduction = BackboneConfig {
            reduction: 6,
            ..Default::default()
        };
        assert!(matches!(build_unet(&bad_reduction), Err(CoreError::Config(_))));
        let bad_width = BackboneConfig {
            base_width: 0,
            ..Default::default()
        };
        assert!(build_unet(&bad_width).is_err());
        let bad_heads = BackboneConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(build_unet(&bad_heads).is_err());
    }

    #[test]
    fn default_parameter_count_reference() {
        // Independent tensor-by-tensor enumeration of the architecture.
        let cfg = BackboneConfig::default();
        let [w1, w2, w3] = cfg.widths();
        let sin = cfg.base_width;
        let td = cfg.time_dim;
        let cl = cfg.latent_channels;
        let cd = cfg.cross_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let norm = |c: usize| 2 * c;
        let attn = |c: usize, kv: usize| norm(c) + linear(c, c) + 2 * linear(kv, c) + linear(c, c);
        let res = |i: usize, o: usize| {
            norm(i)
                + conv(i, o, 3)
                + linear(td, o)
                + norm(o)
                + conv(o, o, 3)
                + if i == o { 0 } else { conv(i, o, 1) }
        };
        let block =
            |i: usize, o: usize| res(i, o) + attn(o, o) + attn(o, cd) + attn(o, o);
        let expected = linear(sin, td)
            + linear(td, td)
            + conv(cl, w1, 3)
            + block(w1, w1)
            + conv(w1, w2, 1)
            + block(w2, w2)
            + conv(w2, w3, 1)
            + block(w3, w3)
            + block(w3, w3)
            + conv(w3, w2, 1)
            + block(2 * w3, w3)
            + conv(w2, w1, 1)
            + block(2 * w2, w2)
            + block(2 * w1, w1)
            + norm(w1)
            + conv(w1, cl, 3);
        let model = build_unet(&cfg).unwrap();
        assert_eq!(model.parameter_count(), expected);
    }
}
