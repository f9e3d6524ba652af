use std::f64::consts::TAU;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start: usize,
    pub duration: usize,
    pub multiplier: f64,
}

/// Diurnal request load with optional bursts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProfile {
    /// Mean requests per step.
    pub base_qps: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
    /// Gaussian noise standard deviation as a fraction of `base_qps`.
    pub noise_scale: f64,
    pub seed: u64,
    /// Steps per simulated day.
    pub day_steps: usize,
    pub step_seconds: f64,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        Self {
            base_qps: 1000.0,
            amplitude: 0.5,
            bursts: Vec::new(),
            noise_scale: 0.05,
            seed: 17,
            day_steps: 1440,
            step_seconds: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficPoint {
    pub step: usize,
    pub timestamp: f64,
    /// Rate before noise.
    pub expected: f64,
    pub count: f64,
}

impl TrafficProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_qps > 0.0) || self.day_steps == 0 || !(self.step_seconds > 0.0) {
            return Err(Error::InvalidArgument(
                "traffic needs positive base_qps, day_steps and step_seconds".into(),
            ));
        }
        if self.noise_scale < 0.0 || self.bursts.iter().any(|b| b.multiplier <= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_scale and burst multipliers must be non-negative / positive".into(),
            ));
        }
        Ok(())
    }

    pub fn expected_rate(&self, step: usize) -> f64 {
        let phase = TAU * (step % self.day_steps) as f64 / self.day_steps as f64;
        let burst: f64 = self
            .bursts
            .iter()
            .filter(|b| step >= b.start && step < b.start + b.duration)
            .map(|b| b.multiplier)
            .product();
        self.base_qps * (1.0 + self.amplitude * phase.sin()) * burst
    }
}

pub fn generate_traffic(profile: &TrafficProfile, horizon: usize) -> Result<Vec<TrafficPoint>> {
    profile.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut rng = seeded_rng(profile.seed);
    Ok((0..horizon)
        .map(|step| {
            let expected = profile.expected_rate(step);
            let z: f64 = StandardNormal.sample(&mut rng);
            let noisy = expected + profile.noise_scale * profile.base_qps * z;
            TrafficPoint {
                step,
                timestamp: step as f64 * profile.step_seconds,
                expected,
                count: noisy.round().max(1.0),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> TrafficProfile {
        TrafficProfile {
            base_qps: 100.0,
            amplitude: 0.0,
            noise_scale: 0.0,
            ..TrafficProfile::default()
        }
    }

    #[test]
    fn constant_without_amplitude_or_noise() {
        let t = generate_traffic(&flat(), 50).unwrap();
        assert!(t.iter().all(|p| p.count == 100.0));
    }

    #[test]
    fn burst_doubles_window() {
        let mut p = flat();
        p.bursts.push(Burst {
            start: 10,
            duration: 10,
            multiplier: 2.0,
        });
        let t = generate_traffic(&p, 30).unwrap();
        for pt in &t {
            let want = if (10..20).contains(&pt.step) {
                200.0
            } else {
                100.0
            };
            assert_eq!(pt.expected, want);
        }
    }

    #[test]
    fn deterministic_and_floored() {
        let p = TrafficProfile {
            base_qps: 2.0,
            amplitude: 0.99,
            noise_scale: 3.0,
            ..TrafficProfile::default()
        };
        let a = generate_traffic(&p, 500).unwrap();
        assert_eq!(a, generate_traffic(&p, 500).unwrap());
        assert!(a.iter().all(|pt| pt.count >= 1.0));
        assert!(generate_traffic(&p, 0).is_err());
    }
}
