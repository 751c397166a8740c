//! DDPM mathematics: the noise schedule, forward noising, v-prediction
//! algebra, the reverse sampling step, and the mask-weighted L1 loss.
//!
//! Timesteps are 1-based: t in [1, T], with alpha_bar[0] = 1 by definition.
//! The v parameterization is
//!
//! ```text
//!   v = sqrt(alpha_bar_t) * eps - sqrt(1 - alpha_bar_t) * x0
//! ```
//!
//! from which x0 and eps are exactly recoverable given x_t.

use ndarray::ArrayD;

use crate::error::{FodError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// beta[t] for t = 1..=T; index 0 is unused (0.0).
    betas: Vec<f64>,
    /// alpha_bar[t] for t = 0..=T; alpha_bar[0] = 1.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas. For T = 1 the single beta is `beta_start`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_steps == 0 {
            return Err(FodError::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(FodError::invalid(format!(
                "beta range must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = vec![0.0; t_steps + 1];
        for (i, b) in betas.iter_mut().enumerate().skip(1) {
            let frac = if t_steps == 1 {
                0.0
            } else {
                (i - 1) as f64 / (t_steps - 1) as f64
            };
            *b = beta_start + (beta_end - beta_start) * frac;
        }
        let mut alpha_bar = vec![1.0; t_steps + 1];
        for t in 1..=t_steps {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    /// The paper-scale default: 1000 steps with the standard DDPM endpoints.
    pub fn default_1000() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid defaults")
    }

    /// A shorter schedule with the terminal noise level preserved: beta_end
    /// is scaled so that alpha_bar[T] stays near the 1000-step value.
    pub fn linear_scaled(t_steps: usize) -> Result<NoiseSchedule> {
        let beta_end = 0.02 * 1000.0 / t_steps as f64;
        NoiseSchedule::linear(t_steps, 1e-4, beta_end.min(0.999))
    }

    pub fn len(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// True when the terminal signal level is small enough for sampling
    /// from pure noise (alpha_bar[T] < 0.01).
    pub fn is_sampling_grade(&self) -> bool {
        self.alpha_bar[self.len()] < 0.01
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(FodError::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) as f32.
    pub fn sqrt_ab(&self, t: usize) -> (f32, f32) {
        let ab = self.alpha_bar[t];
        (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
    }
}

fn check_same_shape(a: &ArrayD<f32>, b: &ArrayD<f32>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FodError::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
pub fn q_sample(
    x0: &ArrayD<f32>,
    t: usize,
    eps: &ArrayD<f32>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f32>> {
    sched.check_t(t)?;
    check_same_shape(x0, eps, "q_sample")?;
    let (sa, sb) = sched.sqrt_ab(t);
    Ok(x0 * sa + eps * sb)
}

/// Training target: v = sqrt(ab_t) eps - sqrt(1 - ab_t) x0.
pub fn v_target(
    x0: &ArrayD<f32>,
    eps: &ArrayD<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f32>> {
    sched.check_t(t)?;
    check_same_shape(x0, eps, "v_target")?;
    let (sa, sb) = sched.sqrt_ab(t);
    Ok(eps * sa - x0 * sb)
}

/// x0 = sqrt(ab_t) x_t - sqrt(1 - ab_t) v.
pub fn predict_x0_from_v(
    x_t: &ArrayD<f32>,
    v: &ArrayD<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f32>> {
    sched.check_t(t)?;
    check_same_shape(x_t, v, "predict_x0_from_v")?;
    let (sa, sb) = sched.sqrt_ab(t);
    Ok(x_t * sa - v * sb)
}

/// eps = sqrt(1 - ab_t) x_t + sqrt(ab_t) v.
pub fn predict_eps_from_v(
    x_t: &ArrayD<f32>,
    v: &ArrayD<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f32>> {
    sched.check_t(t)?;
    check_same_shape(x_t, v, "predict_eps_from_v")?;
    let (sa, sb) = sched.sqrt_ab(t);
    Ok(x_t * sb + v * sa)
}

/// Clip range applied to the predicted x0 inside the sampler; data lives in
/// [-1, 1] after normalization, with slack for unseen extremes.
pub const X0_CLIP: f32 = 1.5;

/// One reverse DDPM step. Predicts x0 from v (clipped), forms the posterior
/// mean, and adds beta-tilde posterior noise except at t = 1.
pub fn ddpm_step(
    x_t: &ArrayD<f32>,
    v_pred: &ArrayD<f32>,
    t: usize,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f32>> {
    sched.check_t(t)?;
    check_same_shape(x_t, v_pred, "ddpm_step")?;
    let x0 = predict_x0_from_v(x_t, v_pred, t, sched)?.mapv(|c| c.clamp(-X0_CLIP, X0_CLIP));

    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta_t = sched.beta(t);
    let alpha_t = 1.0 - beta_t;

    let coef_x0 = (ab_prev.sqrt() * beta_t / (1.0 - ab_t)) as f32;
    let coef_xt = (alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)) as f32;
    let mut out = &x0 * coef_x0 + x_t * coef_xt;

    if t > 1 {
        let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t;
        let std = var.sqrt();
        out.mapv_inplace(|c| c); // keep layout
        for c in out.iter_mut() {
            *c += (std * rng.normal()) as f32;
        }
    }
    Ok(out)
}

/// Loss weights for the mask-emphasized L1: `base` applies everywhere,
/// `mask_bonus` applies inside the distortion mask, and the two sum to one
/// so masked voxels carry unit weight.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub base: f64,
    pub mask_bonus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            base: 0.01,
            mask_bonus: 0.99,
        }
    }
}

/// Mask-weighted L1: base * mean(|xhat - x|) + bonus * mean(mask * |xhat - x|),
/// both means over all elements. Accumulates in f64 for reproducibility.
pub fn masked_weighted_l1(
    xhat: &ArrayD<f32>,
    x: &ArrayD<f32>,
    mask: &ArrayD<f32>,
    w: LossWeights,
) -> Result<f64> {
    check_same_shape(xhat, x, "masked_weighted_l1")?;
    check_same_shape(xhat, mask, "masked_weighted_l1 mask")?;
    let n = xhat.len() as f64;
    let mut all = 0.0f64;
    let mut masked = 0.0f64;
    for ((a, b), m) in xhat.iter().zip(x.iter()).zip(mask.iter()) {
        let d = (a - b).abs() as f64;
        all += d;
        masked += d * *m as f64;
    }
    Ok(w.base * all / n + w.mask_bonus * masked / n)
}
