//! Layer building blocks for the video U-Net. Each layer owns `ParamId`s
//! into the model's store and knows how to extend an autodiff graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::store::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Normalization variant of a norm site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    /// Group normalization over (C/groups, spatial) per leading index.
    Group { groups: usize },
    /// Normalization across the channel axis per position.
    Layer,
}

/// Binds store parameters into a graph, one leaf per parameter per pass.
pub(crate) struct ParamBinder<'s> {
    store: &'s ParamStore,
    cache: Vec<Option<Var>>,
}

impl<'s> ParamBinder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        ParamBinder {
            store,
            cache: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let v = g.leaf(self.store.value(id).clone());
        self.cache[id.0] = Some(v);
        v
    }

    /// The graph leaf bound for `id`, if the pass touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.cache[id.0]
    }
}

pub(crate) struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.push(
            format!("{name}.weight"),
            Tensor::randn(&[co, ci, k, k], std, rng),
            ParamGroup::Backbone,
        );
        let b = store.push(
            format!("{name}.bias"),
            Tensor::zeros(&[co]),
            ParamGroup::Backbone,
        );
        Conv2dLayer { w, b, pad }
    }

    pub fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, x: Var) -> Var {
        let w = pb.var(g, self.w);
        let y = g.conv2d(x, w, self.pad);
        let b = pb.var(g, self.b);
        g.ch_bias(y, b)
    }
}

pub(crate) struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.push(
            format!("{name}.weight"),
            Tensor::randn(&[input, output], std, rng),
            ParamGroup::Backbone,
        );
        let b = store.push(
            format!("{name}.bias"),
            Tensor::zeros(&[output]),
            ParamGroup::Backbone,
        );
        LinearLayer { w, b }
    }

    /// x [M, in] -> [M, out].
    pub fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, x: Var) -> Var {
        let w = pb.var(g, self.w);
        let y = g.matmul(x, w);
        let b = pb.var(g, self.b);
        g.ch_bias(y, b)
    }
}

/// A normalization site. Built as a plain affine norm over backbone
/// parameters; norm injection swaps gamma/beta for tunable copies and adds
/// the gamma0 residual term.
pub(crate) struct NormSite {
    pub kind: NormKind,
    pub eps: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub gamma0: Option<ParamId>,
    pub label: String,
}

impl NormSite {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kind: NormKind,
        eps: f64,
    ) -> Self {
        let gamma = store.push(
            format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            ParamGroup::Backbone,
        );
        let beta = store.push(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamGroup::Backbone,
        );
        NormSite {
            kind,
            eps,
            gamma,
            beta,
            gamma0: None,
            label: name.to_string(),
        }
    }

    pub fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, x: Var) -> Var {
        let normed = match self.kind {
            NormKind::Group { groups } => g.group_norm(x, groups, self.eps),
            NormKind::Layer => g.chan_norm(x, self.eps),
        };
        let gamma = pb.var(g, self.gamma);
        let scaled = g.ch_scale(normed, gamma);
        let beta = pb.var(g, self.beta);
        let affine = g.ch_bias(scaled, beta);
        match self.gamma0 {
            None => affine,
            Some(g0) => {
                let g0v = pb.var(g, g0);
                let residual = if pb.store.value(g0).len() == 1 {
                    g.scale_var(x, g0v)
                } else {
                    g.ch_scale(x, g0v)
                };
                g.add(affine, residual)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AttnKind {
    /// Tokens are spatial positions within a frame.
    SelfSpatial,
    /// Queries are spatial tokens; keys/values come from the text condition.
    CrossText,
    /// Tokens are frames at a fixed spatial position.
    Temporal,
}

pub(crate) struct AttentionLayer {
    pub kind: AttnKind,
    pub norm: NormSite,
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub out: LinearLayer,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kv_dim: usize,
        heads: usize,
        kind: AttnKind,
        norm_kind: NormKind,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let kv_std = (1.0 / kv_dim as f64).sqrt();
        AttentionLayer {
            kind,
            norm: NormSite::new(store, &format!("{name}.norm"), channels, norm_kind, eps),
            q: LinearLayer::new(store, &format!("{name}.q"), channels, channels, std, rng),
            k: LinearLayer::new(store, &format!("{name}.k"), kv_dim, channels, kv_std, rng),
            v: LinearLayer::new(store, &format!("{name}.v"), kv_dim, channels, kv_std, rng),
            out: LinearLayer::new(store, &format!("{name}.out"), channels, channels, std, rng),
            heads,
        }
    }

    /// x [F, C, h, w]; `cond` as [n_tok, kv_dim] for cross attention.
    pub fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, x: Var, cond: Option<Var>) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = self.norm.forward(g, pb, x);

        // Tokenize: [B, T, C].
        let (tokens, batch, t_len) = match self.kind {
            AttnKind::SelfSpatial | AttnKind::CrossText => {
                let p = g.permute(n, &[0, 2, 3, 1]);
                (g.reshape(p, &[f, h * w, c]), f, h * w)
            }
            AttnKind::Temporal => {
                let p = g.permute(n, &[2, 3, 0, 1]);
                (g.reshape(p, &[h * w, f, c]), h * w, f)
            }
        };

        let flat = g.reshape(tokens, &[batch * t_len, c]);
        let q = self.q.forward(g, pb, flat);
        let q = g.reshape(q, &[batch, t_len, c]);
        let (k, v, kv_len) = match self.kind {
            AttnKind::CrossText => {
                let cond = cond.expect("cross attention needs a text condition");
                let n_tok = g.value(cond).shape()[0];
                let k = self.k.forward(g, pb, cond);
                let v = self.v.forward(g, pb, cond);
                let k = g.repeat_batch(k, batch);
                let v = g.repeat_batch(v, batch);
                (k, v, n_tok)
            }
            _ => {
                let k = self.k.forward(g, pb, flat);
                let v = self.v.forward(g, pb, flat);
                let k = g.reshape(k, &[batch, t_len, c]);
                let v = g.reshape(v, &[batch, t_len, c]);
                (k, v, t_len)
            }
        };

        // Split heads: [B, T, C] -> [B*H, T, dh].
        let dh = c / self.heads;
        let split = |g: &mut Graph, t: Var, len: usize| {
            let r = g.reshape(t, &[batch, len, self.heads, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[batch * self.heads, len, dh])
        };
        let qh = split(g, q, t_len);
        let kh = split(g, k, kv_len);
        let vh = split(g, v, kv_len);

        let scores = g.bmm_nt(qh, kh);
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores);
        let ctx = g.bmm_nn(probs, vh);

        // Merge heads and project out.
        let ctx = g.reshape(ctx, &[batch, self.heads, t_len, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[batch * t_len, c]);
        let out = self.out.forward(g, pb, ctx);
        let out = g.reshape(out, &[batch, t_len, c]);

        // Back to [F, C, h, w].
        let spatial = match self.kind {
            AttnKind::SelfSpatial | AttnKind::CrossText => {
                let r = g.reshape(out, &[f, h, w, c]);
                g.permute(r, &[0, 3, 1, 2])
            }
            AttnKind::Temporal => {
                let r = g.reshape(out, &[h, w, f, c]);
                g.permute(r, &[2, 3, 0, 1])
            }
        };
        g.add(x, spatial)
    }
}

pub(crate) struct ResBlock {
    pub norm1: NormSite,
    pub conv1: Conv2dLayer,
    pub time_proj: LinearLayer,
    pub norm2: NormSite,
    pub conv2: Conv2dLayer,
    pub skip: Option<Conv2dLayer>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        time_dim: usize,
        norm_kind: NormKind,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std1 = (2.0 / (ci as f64 * 9.0)).sqrt();
        let std2 = (2.0 / (co as f64 * 9.0)).sqrt();
        ResBlock {
            norm1: NormSite::new(store, &format!("{name}.norm1"), ci, norm_kind, eps),
            conv1: Conv2dLayer::new(store, &format!("{name}.conv1"), ci, co, 3, 1, std1, rng),
            time_proj: LinearLayer::new(
                store,
                &format!("{name}.time_proj"),
                time_dim,
                co,
                (1.0 / time_dim as f64).sqrt(),
                rng,
            ),
            norm2: NormSite::new(store, &format!("{name}.norm2"), co, norm_kind, eps),
            conv2: Conv2dLayer::new(store, &format!("{name}.conv2"), co, co, 3, 1, std2, rng),
            skip: if ci == co {
                None
            } else {
                Some(Conv2dLayer::new(
                    store,
                    &format!("{name}.skip"),
                    ci,
                    co,
                    1,
                    0,
                    (1.0 / ci as f64).sqrt(),
                    rng,
                ))
            },
        }
    }

    /// x [F, Ci, h, w], temb [1, time_dim] -> [F, Co, h, w].
    pub fn forward(&self, g: &mut Graph, pb: &mut ParamBinder, x: Var, temb: Var) -> Var {
        let h1 = self.norm1.forward(g, pb, x);
        let h1 = g.silu(h1);
        let h1 = self.conv1.forward(g, pb, h1);
        let t = self.time_proj.forward(g, pb, temb);
        let co = g.value(t).shape()[1];
        let t = g.reshape(t, &[co]);
        let h1 = g.ch_bias(h1, t);
        let h2 = self.norm2.forward(g, pb, h1);
        let h2 = g.silu(h2);
        let h2 = self.conv2.forward(g, pb, h2);
        let s = match &self.skip {
            None => x,
            Some(conv) => conv.forward(g, pb, x),
        };
        g.add(s, h2)
    }
}
