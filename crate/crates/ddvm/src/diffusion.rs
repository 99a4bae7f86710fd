//! Forward process, epsilon/sample conversions, DDPM ancestral sampling, and
//! replacement-guided imputation.

use crate::error::{Error, Result};
use crate::field::DenseField;
use crate::rng::{self, Stream};
use crate::schedule::{DiffusionStep, NoiseSchedule, GAMMA_MAX, GAMMA_MIN};
use crate::sparse::SparseTarget;

pub use crate::schedule::DiffusionStep as Step;

/// Anything that predicts the noise component from (conditioning, latent, t).
pub trait Denoiser: Sync {
    fn predict(&self, x: &DenseField, y_t: &DenseField, t: f64) -> Result<DenseField>;
}

/// y_t = sqrt(gamma) * y + sqrt(1 - gamma) * eps.
pub fn forward_diffuse(y: &DenseField, eps: &DenseField, gamma: f64) -> Result<DenseField> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArg(format!("gamma must be in (0, 1], got {gamma}")));
    }
    let a = gamma.sqrt();
    let b = (1.0 - gamma).sqrt();
    y.zip(eps, |yv, ev| a * yv + b * ev)
}

/// y_pred = (y_t - sqrt(1 - gamma) * eps_hat) / sqrt(gamma); exact inverse of
/// [`forward_diffuse`] given the same eps.
pub fn eps_to_sample(y_t: &DenseField, eps_hat: &DenseField, gamma: f64) -> Result<DenseField> {
    if gamma < GAMMA_MIN {
        return Err(Error::InvalidArg(format!(
            "gamma {gamma} below lower clip {GAMMA_MIN}; cannot divide by sqrt(gamma)"
        )));
    }
    let a = gamma.sqrt();
    let b = (1.0 - gamma).sqrt();
    y_t.zip(eps_hat, |yt, e| (yt - b * e) / a)
}

/// eps = (y_t - sqrt(gamma) * y) / sqrt(1 - gamma); the noise that maps y to
/// y_t under the forward process.
pub fn recompute_target_eps(y: &DenseField, y_t: &DenseField, gamma: f64) -> Result<DenseField> {
    if gamma > GAMMA_MAX {
        return Err(Error::InvalidArg(format!(
            "gamma {gamma} above upper clip {GAMMA_MAX}; cannot divide by sqrt(1-gamma)"
        )));
    }
    let a = gamma.sqrt();
    let b = (1.0 - gamma).sqrt();
    y_t.zip(y, |yt, yv| (yt - a * yv) / b)
}

/// One ancestral transition t -> s. The clean estimate is clipped to [-1, 1]
/// when `clip` is set; the final step (s = 0) is deterministic and returns the
/// clean estimate itself.
pub fn ddpm_ancestral_step(
    denoiser: &dyn Denoiser,
    x: &DenseField,
    y_t: &DenseField,
    step: &DiffusionStep,
    rng: &mut Stream,
    clip: bool,
) -> Result<DenseField> {
    let eps_hat = denoiser.predict(x, y_t, step.t)?;
    let mut y0 = eps_to_sample(y_t, &eps_hat, step.gamma_t)?;
    if clip {
        y0 = y0.clamp(-1.0, 1.0);
    }
    if step.s <= 0.0 {
        return Ok(y0);
    }
    let sigma_sq = step.sigma_sq();
    let sigma = sigma_sq.max(0.0).sqrt();
    let dir = (1.0 - step.gamma_s - sigma_sq).max(0.0).sqrt();
    let a = step.gamma_s.sqrt();
    let (h, w, c) = y0.shape();
    let z = rng::normal_field(rng, h, w, c);
    let mut out = DenseField::zeros(h, w, c);
    for i in 0..out.len() {
        out.data_mut()[i] = a * y0.data()[i] + dir * eps_hat.data()[i] + sigma * z.data()[i];
    }
    Ok(out)
}

/// Full chain: draw y_1 ~ N(0, I) and walk the schedule grid down to t = 0.
pub fn sample(
    denoiser: &dyn Denoiser,
    x: &DenseField,
    out_channels: usize,
    schedule: &NoiseSchedule,
    rng: &mut Stream,
    clip: bool,
) -> Result<DenseField> {
    let (h, w, _) = x.shape();
    let y1 = rng::normal_field(rng, h, w, out_channels);
    sample_from(denoiser, x, y1, schedule.steps, schedule, rng, clip)
}

/// Partial chain starting from a given latent at grid index `start` (time
/// start/steps), walking down to 0. `start == schedule.steps` is a full chain.
pub fn sample_from(
    denoiser: &dyn Denoiser,
    x: &DenseField,
    mut y: DenseField,
    start: usize,
    schedule: &NoiseSchedule,
    rng: &mut Stream,
    clip: bool,
) -> Result<DenseField> {
    if start == 0 || start > schedule.steps {
        return Err(Error::InvalidArg(format!(
            "start index {start} outside 1..={}",
            schedule.steps
        )));
    }
    let n = schedule.steps as f64;
    for i in (1..=start).rev() {
        let t = i as f64 / n;
        let s = (i - 1) as f64 / n;
        let step = DiffusionStep::new(schedule, t, s)?;
        y = ddpm_ancestral_step(denoiser, x, &y, &step, rng, clip)?;
        if !y.all_finite() {
            return Err(Error::NonFinite { context: format!("sampler at t={t}") });
        }
    }
    Ok(y)
}

/// Output of [`sample_with_replacement`].
#[derive(Clone, Debug)]
pub struct GuidedSample {
    pub field: DenseField,
    /// Set when the known mask was empty and plain sampling ran instead.
    pub fallback_unconditional: bool,
}

/// Conditional sampling by the replacement method: before every denoising
/// step the known region of the latent is overwritten with the forward
/// process applied to the known values (fresh noise each step); after the
/// final step the known region is set to the known values exactly.
pub fn sample_with_replacement(
    denoiser: &dyn Denoiser,
    x: &DenseField,
    known: &SparseTarget,
    schedule: &NoiseSchedule,
    rng: &mut Stream,
    clip: bool,
) -> Result<GuidedSample> {
    let out_channels = known.values.channels();
    if !known.mask.any() {
        let field = sample(denoiser, x, out_channels, schedule, rng, clip)?;
        return Ok(GuidedSample { field, fallback_unconditional: true });
    }
    let (h, w, c) = known.values.shape();
    let mut y = rng::normal_field(rng, h, w, c);
    let n = schedule.steps as f64;
    for i in (1..=schedule.steps).rev() {
        let t = i as f64 / n;
        let s = (i - 1) as f64 / n;
        let step = DiffusionStep::new(schedule, t, s)?;
        let eps = rng::normal_field(rng, h, w, c);
        let noised_known = forward_diffuse(&known.values, &eps, step.gamma_t)?;
        for yy in 0..h {
            for xx in 0..w {
                if known.mask.get(yy, xx) {
                    for ch in 0..c {
                        let v = noised_known.get(yy, xx, ch);
                        y.set(yy, xx, ch, v);
                    }
                }
            }
        }
        y = ddpm_ancestral_step(denoiser, x, &y, &step, rng, clip)?;
    }
    for yy in 0..h {
        for xx in 0..w {
            if known.mask.get(yy, xx) {
                for ch in 0..c {
                    let v = known.values.get(yy, xx, ch);
                    y.set(yy, xx, ch, v);
                }
            }
        }
    }
    Ok(GuidedSample { field: y, fallback_unconditional: false })
}
