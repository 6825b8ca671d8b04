use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Dataset, Manifest, ManifestEntry, MeterSeries, Quantity, Role};
use crate::error::{Error, Result};

const POWER_FACTOR: f64 = 0.92;
const NOMINAL_VOLTAGE: f64 = 230.0;
/// Volts lost per watt drawn.
const VOLTAGE_DROP: f64 = 0.002;

/// Parameters of a factory-like synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_appliances: usize,
    /// Samples at 1 Hz.
    pub length: usize,
    pub seed: u64,
    /// Std of the aggregate noise and of each appliance's on-state noise, in watts.
    pub noise_std: f64,
    /// Range for each appliance's long-run fraction of time switched on.
    pub duty_cycle: [f64; 2],
    /// Range for each appliance's mean on-period, in seconds.
    pub on_seconds: [f64; 2],
    /// Range for each appliance's on-state power level, in watts.
    pub power_level: [f64; 2],
    pub start_timestamp: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_appliances: 3,
            length: 4096,
            seed: 0,
            noise_std: 10.0,
            duty_cycle: [0.2, 0.6],
            on_seconds: [30.0, 120.0],
            power_level: [200.0, 2000.0],
            start_timestamp: 1_600_000_000,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_appliances == 0 || self.length == 0 {
            return Err(Error::Contract(
                "synthetic spec needs appliances and a positive length".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Contract(format!("invalid noise_std {}", self.noise_std)));
        }
        let ranges = [
            ("duty_cycle", self.duty_cycle, 0.0, 1.0),
            ("on_seconds", self.on_seconds, 1.0, f64::INFINITY),
            ("power_level", self.power_level, 0.0, f64::INFINITY),
        ];
        for (name, [lo, hi], min, max) in ranges {
            if !(lo > min && lo <= hi && hi < max) {
                return Err(Error::Contract(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Generated dataset plus the aggregate noise trace and a manifest.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Noise added on top of the appliance sum, per sample.
    pub noise: Vec<f32>,
    pub manifest: Manifest,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        Uniform::new(lo, hi).expect("validated range").sample(rng)
    }
}

/// All six quantities of a meter from its active power.
fn derive_quantities(active: Vec<f32>) -> BTreeMap<Quantity, Vec<f32>> {
    let reactive_ratio = (1.0 - POWER_FACTOR * POWER_FACTOR).sqrt();
    let mut energy = 0.0f64;
    let mut cols: BTreeMap<Quantity, Vec<f32>> = Quantity::ALL
        .iter()
        .map(|&q| (q, Vec::with_capacity(active.len())))
        .collect();
    for &p in &active {
        let p = p as f64;
        let apparent = p / POWER_FACTOR;
        let voltage = NOMINAL_VOLTAGE - VOLTAGE_DROP * p;
        energy += p / 3600.0;
        let row = [
            (Quantity::VoltageRms, voltage),
            (Quantity::CurrentRms, apparent / voltage),
            (Quantity::PowerReactive, apparent * reactive_ratio),
            (Quantity::PowerApparent, apparent),
            (Quantity::EnergyActive, energy),
        ];
        for (q, v) in row {
            cols.get_mut(&q).expect("all quantities present").push(v as f32);
        }
    }
    cols.insert(Quantity::PowerActive, active);
    cols
}

/// Random-telegraph appliances on a shared 1 Hz grid.
///
/// Each appliance switches on with probability `duty / ((1 - duty) * on)`
/// and off with probability `1 / on` per second, so it spends about `duty`
/// of the time on. The aggregate active power is the f32 sum of appliance
/// powers in manifest order plus the noise trace.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_dist = Normal::new(0.0, spec.noise_std).expect("validated std");
    let n = spec.length;

    let mut appliance_power = Vec::with_capacity(spec.n_appliances);
    for _ in 0..spec.n_appliances {
        let duty = uniform(&mut rng, spec.duty_cycle);
        let on_len = uniform(&mut rng, spec.on_seconds);
        let level = uniform(&mut rng, spec.power_level);
        let p_off = (1.0 / on_len).min(1.0);
        let p_on = (duty / ((1.0 - duty) * on_len)).min(1.0);
        let mut on = rng.random_bool(duty);
        let mut power = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if on {
                (level + noise_dist.sample(&mut rng)).max(0.0)
            } else {
                0.0
            };
            power.push(v as f32);
            let flip = if on { p_off } else { p_on };
            if rng.random_bool(flip) {
                on = !on;
            }
        }
        appliance_power.push(power);
    }

    let noise: Vec<f32> = (0..n).map(|_| noise_dist.sample(&mut rng) as f32).collect();
    let aggregate: Vec<f32> = (0..n)
        .map(|t| appliance_power.iter().fold(0.0f32, |acc, a| acc + a[t]) + noise[t])
        .collect();

    let timestamps: Vec<i64> = (0..n as i64).map(|t| spec.start_timestamp + t).collect();
    let mut entries = vec![ManifestEntry {
        meter_id: "aggregate".into(),
        role: Role::Aggregate,
        display_name: "Aggregate".into(),
        file: None,
    }];
    let mut appliances = Vec::new();
    let mut names = Vec::new();
    for (i, power) in appliance_power.into_iter().enumerate() {
        let id = format!("appliance_{i}");
        let name = format!("Machine {}", i + 1);
        appliances.push(MeterSeries::new(&id, timestamps.clone(), derive_quantities(power))?);
        entries.push(ManifestEntry {
            meter_id: id,
            role: Role::Appliance,
            display_name: name.clone(),
            file: None,
        });
        names.push(name);
    }
    let aggregate = MeterSeries::new("aggregate", timestamps, derive_quantities(aggregate))?;
    Ok(Synthetic {
        dataset: Dataset::new(aggregate, appliances, names)?,
        noise,
        manifest: Manifest { entries },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn active(s: &MeterSeries) -> &[f32] {
        s.get(Quantity::PowerActive).unwrap()
    }

    #[test]
    fn noiseless_single_appliance_is_the_aggregate() {
        let spec = SynthSpec {
            n_appliances: 1,
            length: 500,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let s = synth_dataset(&spec).unwrap();
        assert_eq!(active(&s.dataset.aggregate), active(&s.dataset.appliances[0]));
    }

    #[test]
    fn aggregate_reconstructs_from_noise_trace() {
        let s = synth_dataset(&SynthSpec::default()).unwrap();
        let agg = active(&s.dataset.aggregate);
        for t in 0..agg.len() {
            let sum = s.dataset.appliances.iter().fold(0.0f32, |acc, a| acc + active(a)[t]) + s.noise[t];
            assert_eq!(sum, agg[t]);
        }
    }

    #[test]
    fn lone_active_appliance_is_the_aggregate() {
        let spec = SynthSpec {
            n_appliances: 2,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let s = synth_dataset(&spec).unwrap();
        let (a, b) = (active(&s.dataset.appliances[0]), active(&s.dataset.appliances[1]));
        let agg = active(&s.dataset.aggregate);
        let mut seen = 0;
        for t in 0..agg.len() {
            if a[t] > 0.0 && b[t] == 0.0 {
                assert_eq!(agg[t], a[t]);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_dataset(&SynthSpec::default()).unwrap();
        let b = synth_dataset(&SynthSpec::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synth_dataset(&SynthSpec {
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn duty_cycle_is_roughly_respected() {
        let spec = SynthSpec {
            n_appliances: 1,
            length: 200_000,
            duty_cycle: [0.3, 0.3],
            on_seconds: [50.0, 50.0],
            ..SynthSpec::default()
        };
        let s = synth_dataset(&spec).unwrap();
        let on = active(&s.dataset.appliances[0]).iter().filter(|&&v| v > 0.0).count();
        let frac = on as f64 / spec.length as f64;
        assert!((frac - 0.3).abs() < 0.03, "on fraction {frac}");
    }

    #[test]
    fn derived_channels_follow_the_power_factor() {
        let q = derive_quantities(vec![920.0, 0.0]);
        assert!((q[&Quantity::PowerApparent][0] - 1000.0).abs() < 1e-3);
        assert_eq!(q[&Quantity::CurrentRms][1], 0.0);
        assert!((q[&Quantity::EnergyActive][1] - 920.0 / 3600.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let spec = SynthSpec {
            duty_cycle: [0.5, 0.2],
            ..SynthSpec::default()
        };
        assert!(synth_dataset(&spec).is_err());
    }
}
