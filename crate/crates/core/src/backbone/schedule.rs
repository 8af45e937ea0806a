//! Deterministic DDIM timestep grid and transitions (eta = 0).

use candle_core::Tensor;

use crate::error::{Error, Result};

const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

/// DDIM schedule over the scaled-linear beta schedule of the v1 latent
/// diffusion checkpoints (1000 training steps, `steps_offset = 1`).
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    num_steps: usize,
    /// Ascending (inversion order).
    timesteps: Vec<u32>,
    pub guidance_scale: f64,
    alphas_cumprod: Vec<f64>,
    final_alpha_cumprod: f64,
    step_ratio: u32,
}

impl DiffusionSchedule {
    pub fn new(num_steps: usize, guidance_scale: f64) -> Result<Self> {
        if num_steps == 0 || num_steps > TRAIN_TIMESTEPS {
            return Err(Error::invalid(
                "num_steps",
                format!("must lie in [1, {TRAIN_TIMESTEPS}]"),
            ));
        }
        let (s, e) = (BETA_START.sqrt(), BETA_END.sqrt());
        let n = TRAIN_TIMESTEPS as f64 - 1.0;
        let mut acc = 1.0;
        let alphas_cumprod: Vec<f64> = (0..TRAIN_TIMESTEPS)
            .map(|i| {
                let beta = (s + (e - s) * i as f64 / n).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        let step_ratio = (TRAIN_TIMESTEPS / num_steps) as u32;
        let timesteps = (0..num_steps as u32).map(|i| i * step_ratio + 1).collect();
        Ok(Self {
            num_steps,
            timesteps,
            guidance_scale,
            final_alpha_cumprod: alphas_cumprod[0],
            alphas_cumprod,
            step_ratio,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Timesteps in inversion order (strictly increasing).
    pub fn inversion_timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    /// Timesteps in reverse (denoising) order (strictly decreasing).
    pub fn reverse_timesteps(&self) -> Vec<u32> {
        self.timesteps.iter().rev().copied().collect()
    }

    pub fn contains(&self, t: u32) -> bool {
        self.timesteps.binary_search(&t).is_ok()
    }

    pub fn alpha_cumprod(&self, t: u32) -> f64 {
        self.alphas_cumprod[t as usize]
    }

    /// ᾱ of the grid point preceding `t` (the clean end uses ᾱ₀).
    pub fn prev_alpha_cumprod(&self, t: u32) -> f64 {
        match t.checked_sub(self.step_ratio) {
            Some(prev) => self.alphas_cumprod[prev as usize],
            None => self.final_alpha_cumprod,
        }
    }

    /// Moves `z` from noise level ᾱ_from to ᾱ_to along the predicted noise.
    fn transition(z: &Tensor, eps: &Tensor, from: f64, to: f64) -> Result<Tensor> {
        let a = (to / from).sqrt();
        let b = (1.0 - to).sqrt() - (to * (1.0 - from) / from).sqrt();
        Ok(((z * a)? + (eps * b)?)?)
    }

    /// One inversion step: the latent at the grid point before `t` to the latent at `t`.
    pub fn inversion_step(&self, z: &Tensor, eps: &Tensor, t: u32) -> Result<Tensor> {
        self.check(t)?;
        Self::transition(z, eps, self.prev_alpha_cumprod(t), self.alpha_cumprod(t))
    }

    /// One denoising step: the latent at `t` to the latent at the preceding grid point.
    pub fn reverse_step(&self, z: &Tensor, eps: &Tensor, t: u32) -> Result<Tensor> {
        self.check(t)?;
        Self::transition(z, eps, self.alpha_cumprod(t), self.prev_alpha_cumprod(t))
    }

    fn check(&self, t: u32) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::TimestepOutsideSchedule(t))
        }
    }
}

/// Classifier-free guidance: `uncond + scale · (cond − uncond)`.
pub fn guided_noise(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    Ok((uncond + ((cond - uncond)? * scale)?)?)
}
