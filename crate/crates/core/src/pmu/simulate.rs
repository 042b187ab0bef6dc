use nalgebra::{DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{apply_gamma, AttackScenario, Channel, PmuModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMeasurement {
    pub bus: u32,
    pub attacked: bool,
    pub channels: Vec<Channel>,
    /// Interleaved (re, im) values, one pair per channel.
    pub z: Vec<f64>,
}

/// One snapshot of all PMU measurements, ordered like the model's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub units: Vec<UnitMeasurement>,
}

impl MeasurementSet {
    pub fn z(&self, i: usize) -> DVectorView<'_, f64> {
        DVectorView::from_slice(&self.units[i].z, self.units[i].z.len())
    }

    /// Checks that the set lines up with `model`, entry by entry.
    pub fn check(&self, model: &PmuModel) -> Result<()> {
        if self.units.len() != model.units.len() {
            return Err(Error::dims("measurement units", model.units.len(), self.units.len()));
        }
        for (m, u) in self.units.iter().zip(&model.units) {
            if m.bus != u.bus_id {
                return Err(Error::InvalidArgument(format!(
                    "measurement for bus {} where the model expects bus {}",
                    m.bus, u.bus_id
                )));
            }
            if m.z.len() != u.rows() {
                return Err(Error::dims(format!("measurements at bus {}", m.bus), u.rows(), m.z.len()));
            }
            if m.z.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite measurement at bus {}",
                    m.bus
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measurements serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn prepare(model: &PmuModel, x: &DVector<f64>, attack: &AttackScenario) -> Result<()> {
    model.check_state(x)?;
    attack.validate(&model.placement)
}

fn clean(model: &PmuModel, x: &DVector<f64>, attack: &AttackScenario) -> Vec<(DVector<f64>, bool)> {
    model
        .units
        .iter()
        .map(|u| {
            let hv = &u.h * x;
            let th = attack.angle(u.bus);
            if th != 0.0 {
                (apply_gamma(th, hv.as_view()), true)
            } else {
                (hv, attack.b[u.bus])
            }
        })
        .collect()
}

fn assemble(model: &PmuModel, values: Vec<(DVector<f64>, bool)>) -> MeasurementSet {
    MeasurementSet {
        units: model
            .units
            .iter()
            .zip(values)
            .map(|(u, (z, attacked))| UnitMeasurement {
                bus: u.bus_id,
                attacked,
                channels: u.channels.clone(),
                z: z.as_slice().to_vec(),
            })
            .collect(),
    }
}

/// `z_n = Γ_n H_n x` with no noise.
pub fn noiseless_measurements(
    model: &PmuModel,
    x: &DVector<f64>,
    attack: &AttackScenario,
) -> Result<MeasurementSet> {
    prepare(model, x, attack)?;
    Ok(assemble(model, clean(model, x, attack)))
}

/// `z_n = Γ_n H_n x + w_n`, `w_n ~ N(0, Σ_n)`, drawing from `rng`.
pub fn simulate_with_rng<R: Rng + ?Sized>(
    model: &PmuModel,
    x: &DVector<f64>,
    attack: &AttackScenario,
    rng: &mut R,
) -> Result<MeasurementSet> {
    prepare(model, x, attack)?;
    let mut values = clean(model, x, attack);
    for (u, (z, _)) in model.units.iter().zip(values.iter_mut()) {
        let xi = DVector::from_fn(u.rows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        *z += &u.noise_factor * xi;
    }
    Ok(assemble(model, values))
}

/// Seeded version of [`simulate_with_rng`]; equal seeds give identical sets.
pub fn simulate_measurements(
    model: &PmuModel,
    x: &DVector<f64>,
    attack: &AttackScenario,
    seed: u64,
) -> Result<MeasurementSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with_rng(model, x, attack, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcase::fixtures::TWO_BUS;
    use crate::netcase::{build_admittance, parse_case};
    use crate::pmu::{build_pmu_model, PmuPlacement, SIGMA_I, SIGMA_V};

    fn model() -> PmuModel {
        let case = parse_case(TWO_BUS).unwrap();
        let adm = build_admittance(&case).unwrap();
        build_pmu_model(&adm, &PmuPlacement::all(2), SIGMA_V, SIGMA_I).unwrap()
    }

    #[test]
    fn noiseless_unattacked_is_hv() {
        let m = model();
        let v = DVector::from_vec(vec![1.0, 0.98, 0.0, -0.05]);
        let z = noiseless_measurements(&m, &v, &AttackScenario::none(2)).unwrap();
        for (i, u) in m.units.iter().enumerate() {
            assert_eq!(z.z(i).into_owned(), &u.h * &v);
        }
    }

    #[test]
    fn seeded_simulation_is_deterministic_and_round_trips() {
        let m = model();
        let v = DVector::from_vec(vec![1.0, 0.98, 0.0, -0.05]);
        let atk = AttackScenario::from_angles(2, &[(1, 0.3)]).unwrap();
        let a = simulate_measurements(&m, &v, &atk, 11).unwrap();
        let b = simulate_measurements(&m, &v, &atk, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate_measurements(&m, &v, &atk, 12).unwrap());
        assert!(a.units[1].attacked && !a.units[0].attacked);
        assert_eq!(MeasurementSet::from_json(&a.to_json()).unwrap(), a);
        a.check(&m).unwrap();
    }

    #[test]
    fn wrong_state_length_rejected() {
        let m = model();
        let v = DVector::from_vec(vec![1.0, 0.98, 0.0]);
        assert!(matches!(
            noiseless_measurements(&m, &v, &AttackScenario::none(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
