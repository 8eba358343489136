//! Dual-stage fine-tuning: the diffusion noise-prediction objective under a
//! Huber loss, a first-order adaptive-moment optimizer over exactly the
//! stage's trainable parameters, and stage scheduling with the recorded
//! hyperparameter defaults (stage 1: 400 steps at 5e-5, stage 2: 70 steps at
//! 1e-5, batch size 1).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{huber_elem, Graph, Var};
use crate::backbone::layers::ParamBinder;
use crate::backbone::store::ParamId;
use crate::backbone::{encode, ConditionEmbedding, LatentVideo, UNetModel};
use crate::error::{CoreError, Result};
use crate::peft::{trainable_parameters, Stage};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStageConfig {
    pub stage: Stage,
    /// Optimization steps.
    pub steps: usize,
    pub learning_rate: f64,
    /// Independent (t, noise) draws averaged per optimization step.
    pub batch_size: usize,
    /// Huber threshold.
    pub delta: f64,
    pub seed: u64,
}

impl TrainStageConfig {
    /// Adjustable norm-tuning defaults.
    pub fn stage1() -> Self {
        TrainStageConfig {
            stage: Stage::Stage1,
            steps: 400,
            learning_rate: 5e-5,
            batch_size: 1,
            delta: 1.0,
            seed: 0,
        }
    }

    /// Visual-adapter tuning defaults.
    pub fn stage2() -> Self {
        TrainStageConfig {
            stage: Stage::Stage2,
            steps: 70,
            learning_rate: 1e-5,
            batch_size: 1,
            delta: 1.0,
            seed: 1,
        }
    }

    /// Joint ablation mode: both parameter sets in one loop.
    pub fn one_stage() -> Self {
        TrainStageConfig {
            stage: Stage::OneStage,
            ..TrainStageConfig::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::Validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Validation("batch_size must be >= 1".into()));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(CoreError::Validation(format!(
                "huber delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Outcome of one training stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    /// One loss per optimization step.
    pub losses: Vec<f64>,
    pub wall_ms: u128,
    /// Content hash of the trainable parameters after the stage.
    pub trainable_checksum: u64,
    pub trainable_scalars: usize,
}

impl TrainReport {
    pub fn mean_loss_window(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.losses[range];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    /// Mean loss over the first and last deciles of the step series.
    pub fn decile_means(&self) -> Option<(f64, f64)> {
        if self.losses.is_empty() {
            return None;
        }
        let k = (self.losses.len() / 10).max(1);
        let first = self.losses[..k].iter().sum::<f64>() / k as f64;
        let last = self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64;
        Some((first, last))
    }
}

/// Mean Huber loss of a residual tensor.
pub fn huber_loss(residual: &Tensor, delta: f64) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(CoreError::Validation(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    if residual.is_empty() {
        return Err(CoreError::Shape("empty residual".into()));
    }
    let sum: f64 = residual.data().iter().map(|&r| huber_elem(r, delta)).sum();
    Ok(sum / residual.len() as f64)
}

/// Noise the clean latent to timestep `t` and score the model's noise
/// prediction with the Huber loss.
pub fn diffusion_step_loss(
    model: &UNetModel,
    schedule: &NoiseSchedule,
    latent: &LatentVideo,
    t: usize,
    cond: &ConditionEmbedding,
    noise: &Tensor,
    delta: f64,
) -> Result<f64> {
    if noise.shape() != latent.latents.shape() {
        return Err(CoreError::Shape(format!(
            "noise shape {:?} does not match latent {:?}",
            noise.shape(),
            latent.latents.shape()
        )));
    }
    if t > schedule.total_steps() {
        return Err(CoreError::Validation(format!(
            "timestep {t} outside schedule [0, {}]",
            schedule.total_steps()
        )));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(CoreError::Validation(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    let mut g = Graph::new();
    let mut pb = ParamBinder::new(model.store());
    let loss = step_loss_graph(model, schedule, &mut g, &mut pb, latent, t, cond, noise, delta);
    Ok(g.value(loss).item())
}

/// Construct `z_t = sqrt(a_bar) z_0 + sqrt(1 - a_bar) eps`, run the model,
/// and return the Huber loss node on `eps - eps_hat`.
#[allow(clippy::too_many_arguments)]
fn step_loss_graph(
    model: &UNetModel,
    schedule: &NoiseSchedule,
    g: &mut Graph,
    pb: &mut ParamBinder,
    latent: &LatentVideo,
    t: usize,
    cond: &ConditionEmbedding,
    noise: &Tensor,
    delta: f64,
) -> Var {
    let ab = schedule.alpha_bar(t);
    let z_t = latent
        .latents
        .scale(ab.sqrt())
        .add(&noise.scale((1.0 - ab).sqrt()));
    let z_t = g.constant(z_t);
    let cond_v = g.constant(cond.tokens.clone());
    let pred = model.forward_graph(g, pb, z_t, t, cond_v, None);
    let noise_v = g.constant(noise.clone());
    let residual = g.sub(noise_v, pred);
    g.huber_mean(residual, delta)
}

/// First-order adaptive-moment optimizer (no weight decay, no schedule).
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    fn new(lr: f64, params: &[(ParamId, Vec<usize>)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: params
                .iter()
                .map(|(_, shape)| (Tensor::zeros(shape), Tensor::zeros(shape)))
                .collect(),
        }
    }

    fn apply(&mut self, model: &mut UNetModel, ids: &[ParamId], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((id, grad), (m, v)) in ids.iter().zip(grads).zip(&mut self.moments) {
            let value = model.store_mut().value_mut(*id);
            for i in 0..value.len() {
                let gi = grad.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Run one fine-tuning stage on a single clip; only the stage's trainable
/// parameters move, every other tensor stays bit-identical.
pub fn run_stage(
    model: &mut UNetModel,
    schedule: &NoiseSchedule,
    cfg: &TrainStageConfig,
    clip: &VideoClip,
    caption: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    let trainable = trainable_parameters(model, cfg.stage)?;
    let latent = encode(clip, model.config().reduction)?;
    if latent.channels() != model.config().latent_channels {
        return Err(CoreError::Shape(format!(
            "encoded clip has {} latent channels, model expects {}",
            latent.channels(),
            model.config().latent_channels
        )));
    }
    let cond = model.embed_text(caption);
    let total = schedule.total_steps();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let shapes: Vec<(ParamId, Vec<usize>)> = trainable
        .iter()
        .map(|id| (*id, model.store().value(*id).shape().to_vec()))
        .collect();
    let mut adam = Adam::new(cfg.learning_rate, &shapes);

    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grad_acc: Vec<Tensor> = shapes
            .iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batch_size {
            let t = rng.random_range(1..=total);
            let noise = Tensor::from_vec(
                latent.latents.shape(),
                (0..latent.latents.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let mut g = Graph::new();
            let mut pb = ParamBinder::new(model.store());
            let loss =
                step_loss_graph(model, schedule, &mut g, &mut pb, &latent, t, &cond, &noise, cfg.delta);
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite loss at step {step} (stage {})",
                    cfg.stage
                )));
            }
            loss_acc += loss_value;
            let grads = g.backward(loss);
            for ((id, _), acc) in shapes.iter().zip(&mut grad_acc) {
                if let Some(var) = pb.bound(*id) {
                    if let Some(grad) = grads.get(var) {
                        *acc = acc.add(grad);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for acc in &mut grad_acc {
            *acc = acc.scale(scale);
        }
        adam.apply(model, &trainable, &grad_acc);
        losses.push(loss_acc * scale);
    }

    Ok(TrainReport {
        stage: cfg.stage,
        losses,
        wall_ms: start.elapsed().as_millis(),
        trainable_checksum: model.store().checksum(&trainable),
        trainable_scalars: model.store().scalar_count(&trainable),
    })
}

/// Stage 1 then stage 2. Norm and adapter injection must both be in place;
/// adapters are exact identities with zero gradients into their frozen
/// parameters during stage 1, so injecting them up front is equivalent to
/// injecting between stages.
pub fn run_dual_stage(
    model: &mut UNetModel,
    schedule: &NoiseSchedule,
    cfg1: &TrainStageConfig,
    cfg2: &TrainStageConfig,
    clip: &VideoClip,
    caption: &str,
) -> Result<(TrainReport, TrainReport)> {
    if cfg1.stage != Stage::Stage1 || cfg2.stage != Stage::Stage2 {
        return Err(CoreError::Validation(
            "dual-stage training needs a stage1 config followed by a stage2 config".into(),
        ));
    }
    let report1 = run_stage(model, schedule, cfg1, clip, caption)?;
    let report2 = run_stage(model, schedule, cfg2, clip, caption)?;
    Ok((report1, report2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_unet, BackboneConfig};
    use crate::peft::{inject_adapters, inject_norm_tuning, AdapterConfig, PlacementSpec};
    use crate::schedule::ScheduleConfig;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            latent_channels: 4,
            reduction: 2,
            base_width: 8,
            channel_mults: [1, 2, 2],
            heads: 2,
            cross_dim: 8,
            time_dim: 16,
            resnet_norm: crate::backbone::layers::NormKind::Group { groups: 2 },
            ..Default::default()
        }
    }

    fn tiny_clip() -> VideoClip {
        VideoClip::from_fn("t", 2, 4, 4, 1, 8.0, |t, y, x, _| {
            0.2 + 0.1 * t as f32 + 0.05 * (y as f32 + x as f32)
        })
        .unwrap()
    }

    #[test]
    fn huber_closed_forms() {
        assert_eq!(huber_loss(&Tensor::scalar(0.0), 1.0).unwrap(), 0.0);
        assert_eq!(huber_loss(&Tensor::scalar(1.0), 1.0).unwrap(), 0.5);
        assert_eq!(huber_loss(&Tensor::scalar(-1.0), 1.0).unwrap(), 0.5);
        assert_eq!(huber_loss(&Tensor::scalar(2.0), 1.0).unwrap(), 1.5);
        assert!(matches!(
            huber_loss(&Tensor::scalar(1.0), 0.0),
            Err(CoreError::Validation(_))
        ));
    }

    #[test]
    fn loss_is_zero_when_prediction_matches_noise() {
        // Not a model test: zero residual through the same element function.
        let r = Tensor::zeros(&[4, 4]);
        assert_eq!(huber_loss(&r, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn noising_is_identity_at_step_zero() {
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let ab = schedule.alpha_bar(0);
        assert_eq!(ab, 1.0);
        let z0 = Tensor::from_vec(&[2], vec![0.3, -0.7]);
        let noise = Tensor::from_vec(&[2], vec![5.0, -5.0]);
        let z_t = z0.scale(ab.sqrt()).add(&noise.scale((1.0 - ab).sqrt()));
        assert!(z_t.bit_eq(&z0));
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let mut model = build_unet(&tiny_config()).unwrap();
        inject_norm_tuning(&mut model).unwrap();
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let before = model.store().checksum(&model.store().ids().collect::<Vec<_>>());
        let cfg = TrainStageConfig {
            steps: 0,
            ..TrainStageConfig::stage1()
        };
        let report = run_stage(&mut model, &schedule, &cfg, &tiny_clip(), "a caption").unwrap();
        assert!(report.losses.is_empty());
        let after = model.store().checksum(&model.store().ids().collect::<Vec<_>>());
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let run = || {
            let mut model = build_unet(&tiny_config()).unwrap();
            inject_norm_tuning(&mut model).unwrap();
            let cfg = TrainStageConfig {
                steps: 5,
                ..TrainStageConfig::stage1()
            };
            run_stage(&mut model, &schedule, &cfg, &tiny_clip(), "cap").unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.trainable_checksum, b.trainable_checksum);
    }

    #[test]
    fn stage2_without_adapters_is_state_error() {
        let mut model = build_unet(&tiny_config()).unwrap();
        inject_norm_tuning(&mut model).unwrap();
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let cfg = TrainStageConfig {
            steps: 1,
            ..TrainStageConfig::stage2()
        };
        assert!(matches!(
            run_stage(&mut model, &schedule, &cfg, &tiny_clip(), "cap"),
            Err(CoreError::State(_))
        ));
    }

    #[test]
    fn only_trainable_parameters_move() {
        let mut model = build_unet(&tiny_config()).unwrap();
        inject_norm_tuning(&mut model).unwrap();
        inject_adapters(&mut model, &PlacementSpec::default(), &AdapterConfig::default()).unwrap();
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        use crate::backbone::store::ParamGroup;
        let backbone_before = model.store().group_checksum(ParamGroup::Backbone);
        let adapter_before = model.store().group_checksum(ParamGroup::Adapter);
        let cfg = TrainStageConfig {
            steps: 3,
            learning_rate: 1e-3,
            ..TrainStageConfig::stage1()
        };
        run_stage(&mut model, &schedule, &cfg, &tiny_clip(), "cap").unwrap();
        assert_eq!(
            model.store().group_checksum(ParamGroup::Backbone),
            backbone_before,
            "backbone must stay frozen in stage 1"
        );
        assert_eq!(
            model.store().group_checksum(ParamGroup::Adapter),
            adapter_before,
            "adapters must stay frozen in stage 1"
        );
        assert_ne!(
            model.store().group_checksum(ParamGroup::Norm),
            0,
            "norm params exist"
        );
    }
}
