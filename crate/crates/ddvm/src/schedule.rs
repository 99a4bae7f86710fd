//! Noise schedules: signal retention gamma(t) over continuous time t in [0, 1].

use crate::error::{Error, Result};

pub const GAMMA_MIN: f64 = 1e-5;
pub const GAMMA_MAX: f64 = 1.0 - 1e-5;

/// Cosine offset, the usual small shift keeping gamma(0) near 1.
const COSINE_S0: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// cos^2(pi/2 * (t + s0)/(1 + s0)), mapped onto [GAMMA_MIN, GAMMA_MAX].
    Cosine,
    /// Straight line from GAMMA_MAX down to GAMMA_MIN.
    Linear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        }
    }
}

/// Maps continuous time to gamma and owns the sampling discretization
/// t_i = i/steps for i = steps..0.
///
/// Raw curves are rescaled affinely onto [GAMMA_MIN, GAMMA_MAX] instead of
/// hard-clamped: a clamp would flatten the curve at the t=1 end and break
/// strict monotonicity on fine grids. The rescale moves gamma by at most
/// ~1.5e-4 anywhere.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArg("schedule needs at least 1 step".into()));
        }
        Ok(Self { kind, steps })
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, steps)
    }

    fn raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                let u = (t + COSINE_S0) / (1.0 + COSINE_S0) * std::f64::consts::FRAC_PI_2;
                u.cos().powi(2)
            }
            ScheduleKind::Linear => 1.0 - t,
        }
    }

    /// Signal retention at time t; strictly decreasing with
    /// gamma(0) = GAMMA_MAX-ish and gamma(1) = GAMMA_MIN.
    pub fn gamma(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let r0 = self.raw(0.0);
        let r1 = self.raw(1.0);
        GAMMA_MIN + (self.raw(t) - r1) * (GAMMA_MAX - GAMMA_MIN) / (r0 - r1)
    }

    /// Grid times for sampling, descending: steps/N, (steps-1)/N, ..., 0.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).rev().map(|i| i as f64 / self.steps as f64).collect()
    }
}

/// One reverse-process transition from time t down to s < t.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionStep {
    pub t: f64,
    pub s: f64,
    pub gamma_t: f64,
    pub gamma_s: f64,
}

impl DiffusionStep {
    pub fn new(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) || !(s..=1.0).contains(&t) || s >= t {
            return Err(Error::InvalidArg(format!("need 0 <= s < t <= 1, got s={s}, t={t}")));
        }
        Ok(Self { t, s, gamma_t: schedule.gamma(t), gamma_s: schedule.gamma(s) })
    }

    /// DDPM ancestral transition variance
    /// sigma^2 = (1 - gamma_s)/(1 - gamma_t) * (1 - gamma_t/gamma_s).
    pub fn sigma_sq(&self) -> f64 {
        (1.0 - self.gamma_s) / (1.0 - self.gamma_t) * (1.0 - self.gamma_t / self.gamma_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_hold() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(kind, 64).unwrap();
            assert!(s.gamma(0.0) >= 1.0 - 1e-3, "{kind:?}");
            assert!(s.gamma(1.0) <= 1e-3, "{kind:?}");
            assert!(s.gamma(1.0) >= GAMMA_MIN);
            assert!(s.gamma(0.0) <= GAMMA_MAX);
        }
    }

    #[test]
    fn strictly_decreasing_on_fine_grid() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(kind, 64).unwrap();
            let mut prev = s.gamma(0.0);
            for i in 1..=1000 {
                let g = s.gamma(i as f64 / 1000.0);
                assert!(g < prev, "{kind:?} not strictly decreasing at i={i}");
                prev = g;
            }
        }
    }

    #[test]
    fn grid_descends_from_one_to_zero() {
        let s = NoiseSchedule::cosine(4).unwrap();
        assert_eq!(s.grid(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn sigma_sq_nonnegative_and_zero_at_t_eq_s_limit() {
        let s = NoiseSchedule::cosine(64).unwrap();
        for i in 1..=64usize {
            let t = i as f64 / 64.0;
            let step = DiffusionStep::new(&s, t, t - 1.0 / 64.0).unwrap();
            assert!(step.sigma_sq() >= 0.0, "sigma^2 < 0 at t={t}");
        }
        // s -> t limit: variance collapses
        let tiny = DiffusionStep {
            t: 0.5,
            s: 0.5,
            gamma_t: s.gamma(0.5),
            gamma_s: s.gamma(0.5),
        };
        assert_eq!(tiny.sigma_sq(), 0.0);
    }

    #[test]
    fn step_validation() {
        let s = NoiseSchedule::cosine(64).unwrap();
        assert!(DiffusionStep::new(&s, 0.5, 0.5).is_err());
        assert!(DiffusionStep::new(&s, 0.4, 0.5).is_err());
        assert!(DiffusionStep::new(&s, 1.1, 0.5).is_err());
        assert!(DiffusionStep::new(&s, 0.5, 0.2).is_ok());
    }
}
