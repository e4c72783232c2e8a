//! Force provider backed by a trained model, for plugging into the MD
//! engine and diagnostics.

use super::{Model, ModelError};
use crate::calibrate::CalibrationModel;
use crate::chem::Conformation;
use crate::md::{ForceProvider, ProviderError};
use ndarray::Array2;

/// Wraps a model with a fixed species assignment so it can serve as an MD
/// force provider. When a calibration map is attached it is applied to the
/// energy only: forces are what the model was trained on directly, and
/// rescaling them would break the force match.
#[derive(Debug, Clone)]
pub struct ModelProvider {
    model: Model,
    species: Vec<usize>,
    calibration: Option<CalibrationModel>,
}

impl ModelProvider {
    pub fn new(model: Model, species: Vec<usize>) -> Result<Self, ModelError> {
        for &id in &species {
            if id >= model.config().n_species {
                return Err(ModelError::SpeciesOutOfRange {
                    id,
                    n_species: model.config().n_species,
                });
            }
        }
        Ok(Self {
            model,
            species,
            calibration: None,
        })
    }

    pub fn for_conformation(model: Model, c: &Conformation) -> Result<Self, ModelError> {
        Self::new(model, c.species().to_vec())
    }

    pub fn with_calibration(mut self, calibration: CalibrationModel) -> Self {
        self.calibration = Some(calibration);
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn calibration(&self) -> Option<&CalibrationModel> {
        self.calibration.as_ref()
    }
}

impl ForceProvider for ModelProvider {
    fn energy_forces(
        &mut self,
        positions: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>), ProviderError> {
        let pred = self.model.predict_raw(positions, &self.species)?;
        let energy = match &self.calibration {
            Some(cal) => cal.apply(pred.energy),
            None => pred.energy,
        };
        Ok((energy, pred.forces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelParams;
    use crate::model::ModelConfig;
    use crate::testutil::{random_positions, seeded_rng};

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            n_layers: 2,
            dim: 16,
            n_heads: 4,
            n_rbf: 8,
            cutoff: 5.0,
            n_species: 3,
        };
        Model::new(config.clone(), ModelParams::random_dense(&config, seed)).unwrap()
    }

    #[test]
    fn provider_matches_direct_prediction() {
        let model = tiny_model(3);
        let mut rng = seeded_rng(1);
        let pos = random_positions(&mut rng, 5, 2.0);
        let species = vec![0, 1, 2, 0, 1];
        let direct = model.predict_raw(&pos, &species).unwrap();
        let mut provider = ModelProvider::new(model, species).unwrap();
        let (e, f) = provider.energy_forces(&pos).unwrap();
        assert_eq!(e, direct.energy);
        assert_eq!(f, direct.forces);
    }

    #[test]
    fn calibration_scales_energy_but_not_forces() {
        let model = tiny_model(4);
        let mut rng = seeded_rng(2);
        let pos = random_positions(&mut rng, 4, 2.0);
        let species = vec![0, 1, 2, 0];
        let raw = model.predict_raw(&pos, &species).unwrap();

        let cal = CalibrationModel {
            w: 0.5,
            b: -2.5,
            fit_residual_mae: 0.0,
        };
        let mut provider = ModelProvider::new(model, species)
            .unwrap()
            .with_calibration(cal);
        let (e, f) = provider.energy_forces(&pos).unwrap();
        assert_eq!(e, 0.5 * raw.energy - 2.5);
        assert_eq!(f, raw.forces, "forces must stay uncalibrated");
    }

    #[test]
    fn bad_species_rejected_at_construction() {
        let model = tiny_model(5);
        assert!(matches!(
            ModelProvider::new(model, vec![0, 7]),
            Err(ModelError::SpeciesOutOfRange { id: 7, .. })
        ));
    }
}
