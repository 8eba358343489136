//! Deterministic DDIM sampling and inversion plus the end-to-end edit
//! pipeline: encode the source, invert under the source caption, then
//! denoise under the edit prompt with classifier-free guidance. An optional
//! condition hook injects auxiliary structural residuals into decoder
//! blocks during sampling.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    decode, encode, ConditionEmbedding, ConditionHook, LatentVideo, UNetModel,
};
use crate::error::{CoreError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of DDIM steps; 0 gives the identity (empty schedule).
    pub num_steps: usize,
    /// Classifier-free guidance strength during editing.
    pub guidance_scale: f64,
    /// Stochasticity parameter; this sampler is deterministic only, so any
    /// non-zero value is rejected.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps > schedule.total_steps() {
            return Err(CoreError::Validation(format!(
                "num_steps {} exceeds schedule length {}",
                self.num_steps,
                schedule.total_steps()
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(CoreError::Validation(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        if self.eta != 0.0 {
            return Err(CoreError::Validation(
                "only deterministic DDIM (eta = 0) is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that predicts noise from `(z_t, t, condition)`. Implemented by
/// the U-Net and by state-independent stubs in tests.
pub trait NoisePredictor {
    fn predict(
        &self,
        latents: &Tensor,
        t: usize,
        cond: &ConditionEmbedding,
        hook: Option<&dyn ConditionHook>,
    ) -> Result<Tensor>;
}

impl NoisePredictor for UNetModel {
    fn predict(
        &self,
        latents: &Tensor,
        t: usize,
        cond: &ConditionEmbedding,
        hook: Option<&dyn ConditionHook>,
    ) -> Result<Tensor> {
        let latent = LatentVideo {
            latents: latents.clone(),
            timestep: Some(t),
        };
        self.predict_noise(&latent, t, cond, hook)
    }
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`, with the scale 0 and 1
/// collapses returned exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(CoreError::Shape(format!(
            "cfg shapes differ: {:?} vs {:?}",
            eps_uncond.shape(),
            eps_cond.shape()
        )));
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_uncond.zip(eps_cond, |u, c| u + scale * (c - u)))
}

/// Ascending DDIM timesteps 0 = tau_0 < ... < tau_n = T, uniform stride.
pub fn ddim_timesteps(schedule: &NoiseSchedule, num_steps: usize) -> Vec<usize> {
    let t = schedule.total_steps();
    (0..=num_steps)
        .map(|i| ((i * t) as f64 / num_steps.max(1) as f64).round() as usize)
        .collect()
}

fn ddim_update(z: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Tensor {
    // x0 = (z - sqrt(1 - ab) eps) / sqrt(ab); z' = sqrt(ab') x0 + sqrt(1 - ab') eps
    let x0 = z
        .zip(eps, |zv, ev| zv - (1.0 - ab_from).sqrt() * ev)
        .scale(1.0 / ab_from.sqrt());
    x0.scale(ab_to.sqrt())
        .add(&eps.scale((1.0 - ab_to).sqrt()))
}

fn predict_guided(
    predictor: &dyn NoisePredictor,
    z: &Tensor,
    t: usize,
    cond: &ConditionEmbedding,
    uncond: Option<&ConditionEmbedding>,
    scale: f64,
    hook: Option<&dyn ConditionHook>,
) -> Result<Tensor> {
    match uncond {
        Some(uncond) if scale != 1.0 => {
            let eps_c = predictor.predict(z, t, cond, hook)?;
            let eps_u = predictor.predict(z, t, uncond, hook)?;
            cfg_combine(&eps_u, &eps_c, scale)
        }
        _ => predictor.predict(z, t, cond, hook),
    }
}

/// Deterministic DDIM denoising from `z_T` down the descending schedule.
pub fn ddim_sample(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_t: &LatentVideo,
    cond: &ConditionEmbedding,
    uncond: Option<&ConditionEmbedding>,
    cfg: &SamplerConfig,
    hook: Option<&dyn ConditionHook>,
) -> Result<LatentVideo> {
    cfg.validate(schedule)?;
    if !z_t.latents.all_finite() {
        return Err(CoreError::Numeric("non-finite initial latent".into()));
    }
    let taus = ddim_timesteps(schedule, cfg.num_steps);
    let mut z = z_t.latents.clone();
    for i in (1..taus.len()).rev() {
        let (t, s) = (taus[i], taus[i - 1]);
        let eps = predict_guided(predictor, &z, t, cond, uncond, cfg.guidance_scale, hook)?;
        if eps.shape() != z.shape() {
            return Err(CoreError::Shape(format!(
                "predictor returned {:?} for latent {:?}",
                eps.shape(),
                z.shape()
            )));
        }
        z = ddim_update(&z, &eps, schedule.alpha_bar(t), schedule.alpha_bar(s));
        if !z.all_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite latent after sampling step {} (t = {t})",
                taus.len() - i
            )));
        }
    }
    Ok(LatentVideo {
        latents: z,
        timestep: Some(0),
    })
}

/// DDIM inversion: run the update in reverse (ascending steps) with guidance
/// fixed at 1, mapping a clean latent to an initial noise latent.
pub fn ddim_invert(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_0: &LatentVideo,
    cond: &ConditionEmbedding,
    cfg: &SamplerConfig,
) -> Result<LatentVideo> {
    cfg.validate(schedule)?;
    if !z_0.latents.all_finite() {
        return Err(CoreError::Numeric("non-finite initial latent".into()));
    }
    let taus = ddim_timesteps(schedule, cfg.num_steps);
    let mut z = z_0.latents.clone();
    for i in 0..taus.len().saturating_sub(1) {
        let (t, s) = (taus[i], taus[i + 1]);
        let eps = predictor.predict(&z, t, cond, None)?;
        if eps.shape() != z.shape() {
            return Err(CoreError::Shape(format!(
                "predictor returned {:?} for latent {:?}",
                eps.shape(),
                z.shape()
            )));
        }
        z = ddim_update(&z, &eps, schedule.alpha_bar(t), schedule.alpha_bar(s));
        if !z.all_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite latent after inversion step {i} (t = {t})"
            )));
        }
    }
    Ok(LatentVideo {
        latents: z,
        timestep: Some(*taus.last().unwrap_or(&0)),
    })
}

/// Full edit pipeline: encode, invert under the source caption, sample under
/// the edit prompt with CFG, decode. Output matches the source geometry.
pub fn edit_video(
    model: &UNetModel,
    schedule: &NoiseSchedule,
    source: &VideoClip,
    source_caption: &str,
    edit_prompt: &str,
    cfg: &SamplerConfig,
    hook: Option<&dyn ConditionHook>,
) -> Result<VideoClip> {
    let latent = encode(source, model.config().reduction)?;
    if latent.channels() != model.config().latent_channels {
        return Err(CoreError::Shape(format!(
            "encoded clip has {} latent channels, model expects {}",
            latent.channels(),
            model.config().latent_channels
        )));
    }
    let source_cond = model.embed_text(source_caption);
    let edit_cond = model.embed_text(edit_prompt);
    let uncond = model.embed_text("");
    let inverted = ddim_invert(model, schedule, &latent, &source_cond, cfg)?;
    let sampled = ddim_sample(
        model,
        schedule,
        &inverted,
        &edit_cond,
        Some(&uncond),
        cfg,
        hook,
    )?;
    decode(
        &sampled,
        model.config().reduction,
        format!("{}-edited", source.id()),
        source.fps(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// State-independent predictor: always returns the same tensor.
    struct ConstPredictor(Tensor);

    impl NoisePredictor for ConstPredictor {
        fn predict(
            &self,
            _z: &Tensor,
            _t: usize,
            _cond: &ConditionEmbedding,
            _hook: Option<&dyn ConditionHook>,
        ) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    fn cond(dim: usize) -> ConditionEmbedding {
        ConditionEmbedding {
            tokens: Tensor::zeros(&[1, dim]),
        }
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn cfg_collapses_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let u = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let c = Tensor::randn(&[2, 3], 1.0, &mut rng);
        assert!(cfg_combine(&u, &c, 0.0).unwrap().bit_eq(&u));
        assert!(cfg_combine(&u, &c, 1.0).unwrap().bit_eq(&c));
        let z = Tensor::zeros(&[2, 3]);
        let v = cfg_combine(&z, &c, 7.5).unwrap();
        assert!(v.max_abs_diff(&c.scale(7.5)) < 1e-12);
        assert!(cfg_combine(&u, &Tensor::zeros(&[3, 2]), 2.0).is_err());
    }

    #[test]
    fn timestep_grid_is_uniform_and_complete() {
        let s = schedule();
        let taus = ddim_timesteps(&s, 50);
        assert_eq!(taus.len(), 51);
        assert_eq!(taus[0], 0);
        assert_eq!(*taus.last().unwrap(), 1000);
        for w in taus.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn invert_then_sample_recovers_input_on_constant_stub() {
        let s = schedule();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let stub = ConstPredictor(Tensor::randn(&[2, 4, 2, 2], 0.5, &mut rng));
        let z0 = LatentVideo {
            latents: Tensor::randn(&[2, 4, 2, 2], 1.0, &mut rng),
            timestep: Some(0),
        };
        let cfg = SamplerConfig::default();
        let c = cond(8);
        let inv = ddim_invert(&stub, &s, &z0, &c, &cfg).unwrap();
        let back = ddim_sample(&stub, &s, &inv, &c, None, &cfg, None).unwrap();
        assert!(
            back.latents.max_abs_diff(&z0.latents) < 1e-9,
            "DDIM must be exactly invertible for a state-independent predictor"
        );
    }

    #[test]
    fn single_step_applies_exactly_one_update() {
        let s = schedule();
        let stub = ConstPredictor(Tensor::zeros(&[1, 1, 1, 1]));
        let z = LatentVideo {
            latents: Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]),
            timestep: None,
        };
        let cfg = SamplerConfig {
            num_steps: 1,
            ..Default::default()
        };
        // With eps = 0 the single update from T to 0 is x0 = z / sqrt(ab_T).
        let out = ddim_sample(&stub, &s, &z, &cond(4), None, &cfg, None).unwrap();
        let expected = 1.0 / s.alpha_bar(1000).sqrt();
        assert!((out.latents.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = schedule();
        let stub = ConstPredictor(Tensor::zeros(&[1, 2, 2, 2]));
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z = LatentVideo {
            latents: Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng),
            timestep: Some(0),
        };
        let cfg = SamplerConfig {
            num_steps: 0,
            ..Default::default()
        };
        let inv = ddim_invert(&stub, &s, &z, &cond(4), &cfg).unwrap();
        assert!(inv.latents.bit_eq(&z.latents));
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = schedule();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let stub = ConstPredictor(Tensor::randn(&[1, 2, 2, 2], 0.3, &mut rng));
        let z = LatentVideo {
            latents: Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng),
            timestep: None,
        };
        let cfg = SamplerConfig {
            num_steps: 10,
            ..Default::default()
        };
        let c = cond(4);
        let a = ddim_sample(&stub, &s, &z, &c, None, &cfg, None).unwrap();
        let b = ddim_sample(&stub, &s, &z, &c, None, &cfg, None).unwrap();
        assert!(a.latents.bit_eq(&b.latents));
    }

    #[test]
    fn nonzero_eta_is_rejected() {
        let s = schedule();
        let cfg = SamplerConfig {
            eta: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate(&s).is_err());
    }
}
