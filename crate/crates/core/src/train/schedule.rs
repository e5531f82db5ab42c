use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup-cosine learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.peak && self.peak.is_finite()) {
            return Err(Error::Config(format!(
                "lr needs 0 < min <= peak, got min {} and peak {}",
                self.min, self.peak
            )));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "lr.warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Linear ramp from `min` to `peak` over the warmup, then a half cosine
    /// down to `min` at `total_steps`. Steps past the end stay at `min`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return self.min;
        }
        if step < self.warmup_steps {
            return self.min + (self.peak - self.min) * step as f64 / self.warmup_steps as f64;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak - 0.5 * (self.peak - self.min) * (1.0 - (PI * progress).cos())
    }
}

/// Free function form of [`LrSchedule::lr_at`].
pub fn lr_at(step: usize, sched: &LrSchedule) -> f64 {
    sched.lr_at(step)
}

/// SWA window used for each training batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowSchedule {
    Fixed {
        window: usize,
    },
    /// `w_short` with probability `p_short`, otherwise `w_long`; from step
    /// `ceil(anneal_fraction * total_steps)` on, always `w_long`.
    Stochastic {
        w_short: usize,
        w_long: usize,
        p_short: f64,
        anneal_fraction: f64,
    },
}

impl WindowSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WindowSchedule::Fixed { window } if window == 0 => {
                Err(Error::Config("windows.window must be positive".into()))
            }
            WindowSchedule::Stochastic {
                w_short,
                w_long,
                p_short,
                anneal_fraction,
            } => {
                if w_short == 0 || w_short > w_long {
                    return Err(Error::Config(format!(
                        "windows need 0 < w_short <= w_long, got {w_short} and {w_long}"
                    )));
                }
                if !(0.0..=1.0).contains(&p_short) {
                    return Err(Error::Config(format!(
                        "windows.p_short must lie in [0, 1], got {p_short}"
                    )));
                }
                if !(0.0..=1.0).contains(&anneal_fraction) {
                    return Err(Error::Config(format!(
                        "windows.anneal_fraction must lie in [0, 1], got {anneal_fraction}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// First step that no longer samples.
    pub fn anneal_step(&self, total_steps: usize) -> usize {
        match *self {
            WindowSchedule::Fixed { .. } => 0,
            WindowSchedule::Stochastic { anneal_fraction, .. } => {
                (anneal_fraction * total_steps as f64).ceil() as usize
            }
        }
    }

    /// The longest window the schedule can produce.
    pub fn long_window(&self) -> usize {
        match *self {
            WindowSchedule::Fixed { window } => window,
            WindowSchedule::Stochastic { w_long, .. } => w_long,
        }
    }

    /// Window for `step`. Draws exactly one number from `rng` on every
    /// sampling step, so the stream position depends only on the step.
    pub fn sample(&self, step: usize, total_steps: usize, rng: &mut impl RngCore) -> usize {
        match *self {
            WindowSchedule::Fixed { window } => window,
            WindowSchedule::Stochastic {
                w_short,
                w_long,
                p_short,
                ..
            } => {
                if step >= self.anneal_step(total_steps) {
                    return w_long;
                }
                if rng.random::<f64>() < p_short {
                    w_short
                } else {
                    w_long
                }
            }
        }
    }
}

/// Free function form of [`WindowSchedule::sample`].
pub fn sample_window(step: usize, total_steps: usize, sched: &WindowSchedule, rng: &mut impl RngCore) -> usize {
    sched.sample(step, total_steps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn sched() -> LrSchedule {
        LrSchedule {
            peak: 3e-4,
            min: 3e-6,
            warmup_steps: 20,
            total_steps: 1000,
        }
    }

    #[test]
    fn endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(20), 3e-4);
        assert_eq!(s.lr_at(1000), 3e-6);
        assert_eq!(s.lr_at(0), 3e-6);
        assert_eq!(s.lr_at(5000), 3e-6);
        assert!((s.lr_at(510) - (3e-4 + 3e-6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = LrSchedule {
            warmup_steps: 0,
            ..sched()
        };
        assert_eq!(s.lr_at(0), 3e-4);
    }

    #[test]
    fn zero_probability_always_long() {
        let w = WindowSchedule::Stochastic {
            w_short: 16,
            w_long: 128,
            p_short: 0.0,
            anneal_fraction: 1.0,
        };
        let mut rng = stream(0, Stream::Window);
        assert!((0..1000).all(|s| w.sample(s, 1000, &mut rng) == 128));
    }

    #[test]
    fn invalid_windows_are_rejected() {
        let w = WindowSchedule::Stochastic {
            w_short: 256,
            w_long: 128,
            p_short: 0.5,
            anneal_fraction: 0.9,
        };
        assert!(w.validate().is_err());
        assert!(WindowSchedule::Fixed { window: 0 }.validate().is_err());
    }
}
