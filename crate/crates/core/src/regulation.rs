//! Shape regulation of initial pseudo labels.
//!
//! A prediction `X_α` is projected onto the shape prior, its coefficients are
//! clamped to the ±3σ box and the clamped shape `X_β` is mapped back into the
//! image frame. If no landmark moved further than `Z` millimetres the adjusted
//! shape is used; otherwise the raw prediction is kept with the offending
//! landmarks excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::shape_model::{ShapeCoefficients, ShapeModel};

/// Clinically acceptable deviation.
pub const DEFAULT_Z_MM: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Adjusted,
    RawWithExclusions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub branch: Branch,
    /// Per landmark `‖X_β,i − X_α,i‖` in millimetres.
    pub deviations_mm: Vec<f64>,
    pub max_deviation_mm: f64,
}

impl PseudoLabel {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Componentwise clamp to `[−3σ_k, +3σ_k]`; the transform is carried through.
pub fn clamp_coefficients(model: &ShapeModel, coeffs: &ShapeCoefficients) -> Result<ShapeCoefficients> {
    if coeffs.values.len() != model.n_components() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} components, got {} coefficients",
            model.n_components(),
            coeffs.values.len()
        )));
    }
    let values = coeffs
        .values
        .iter()
        .zip(model.sigmas())
        .map(|(&e, &sigma)| {
            let bound = 3.0 * sigma;
            if e <= -bound {
                -bound
            } else if e >= bound {
                bound
            } else {
                e
            }
        })
        .collect();
    Ok(ShapeCoefficients { values, transform: coeffs.transform })
}

pub fn regulate(model: &ShapeModel, initial: &LandmarkSet, z_mm: f64) -> Result<PseudoLabel> {
    if initial.len() != model.n_landmarks() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} landmarks, prediction has {}",
            model.n_landmarks(),
            initial.len()
        )));
    }
    if !(z_mm > 0.0) {
        return Err(Error::InvalidConfig(format!("Z must be positive, got {z_mm}")));
    }
    let raw = initial.flatten();
    let coeffs = model.project(&raw)?;
    let clamped = clamp_coefficients(model, &coeffs)?;
    let adjusted = model.reconstruct(&clamped)?;

    let spacing = initial.spacing_mm();
    let deviations_mm: Vec<f64> = adjusted
        .points()
        .zip(raw.points())
        .map(|(b, a)| (b[0] - a[0]).hypot(b[1] - a[1]) * spacing)
        .collect();
    let max_deviation_mm = deviations_mm.iter().copied().fold(0.0, f64::max);

    if max_deviation_mm <= z_mm {
        Ok(PseudoLabel {
            coords: adjusted.points().collect(),
            valid: vec![true; initial.len()],
            branch: Branch::Adjusted,
            deviations_mm,
            max_deviation_mm,
        })
    } else {
        Ok(PseudoLabel {
            coords: initial.coords().to_vec(),
            valid: deviations_mm.iter().map(|&d| d <= z_mm).collect(),
            branch: Branch::RawWithExclusions,
            deviations_mm,
            max_deviation_mm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ShapeVector, SimilarityTransform};
    use crate::shape_model::{build_shape_model, DEFAULT_VARIANCE_TARGET};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ShapeModel {
        let base = [
            [0.50, 0.18],
            [0.71, 0.26],
            [0.80, 0.47],
            [0.70, 0.70],
            [0.52, 0.79],
            [0.30, 0.72],
            [0.21, 0.50],
            [0.31, 0.29],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let sets: Vec<LandmarkSet> = (0..40)
            .map(|_| {
                let pts: Vec<[f64; 2]> = base
                    .iter()
                    .map(|p| [p[0] + rng.random_range(-0.01..0.01), p[1] + rng.random_range(-0.01..0.01)])
                    .collect();
                LandmarkSet::new(pts, 100.0).unwrap()
            })
            .collect();
        build_shape_model(&sets, DEFAULT_VARIANCE_TARGET).unwrap()
    }

    fn in_box_shape(model: &ShapeModel, seed: u64) -> LandmarkSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = model.sigmas().iter().map(|s| rng.random_range(-2.0 * s..2.0 * s)).collect();
        let transform = SimilarityTransform { scale: 2.2, rotation: 0.1, translation: [-0.6, -0.55] };
        let shape = model.reconstruct(&ShapeCoefficients { values, transform }).unwrap();
        LandmarkSet::unflatten(&shape, 100.0).unwrap()
    }

    #[test]
    fn inside_box_is_unchanged() {
        let m = model();
        let values: Vec<f64> = m.sigmas().iter().map(|s| 2.9 * s).collect();
        let c = ShapeCoefficients { values: values.clone(), transform: SimilarityTransform::identity() };
        assert_eq!(clamp_coefficients(&m, &c).unwrap().values, values);
    }

    #[test]
    fn outside_box_is_clamped() {
        let m = model();
        let mut values = vec![0.0; m.n_components()];
        values[0] = 5.0 * m.sigmas()[0];
        let c = ShapeCoefficients { values, transform: SimilarityTransform::identity() };
        let out = clamp_coefficients(&m, &c).unwrap();
        assert_eq!(out.values[0], 3.0 * m.sigmas()[0]);

        let mut values = vec![0.0; m.n_components()];
        values[0] = -3.0 * m.sigmas()[0];
        let c = ShapeCoefficients { values, transform: SimilarityTransform::identity() };
        assert_eq!(clamp_coefficients(&m, &c).unwrap().values[0], -3.0 * m.sigmas()[0]);
    }

    #[test]
    fn clamp_rejects_length_mismatch() {
        let m = model();
        let c = ShapeCoefficients { values: vec![0.0], transform: SimilarityTransform::identity() };
        if m.n_components() != 1 {
            assert!(clamp_coefficients(&m, &c).is_err());
        }
    }

    #[test]
    fn plausible_shape_is_adjusted_in_place() {
        let m = model();
        let x = in_box_shape(&m, 1);
        let label = regulate(&m, &x, DEFAULT_Z_MM).unwrap();
        assert_eq!(label.branch, Branch::Adjusted);
        assert!(label.valid.iter().all(|&v| v));
        assert!(label.max_deviation_mm < 1e-9);
        for (a, b) in label.coords.iter().zip(x.coords()) {
            assert!((a[0] - b[0]).abs() < 1e-11 && (a[1] - b[1]).abs() < 1e-11);
        }
    }

    #[test]
    fn displaced_landmark_is_excluded() {
        let m = model();
        let x = in_box_shape(&m, 2);
        let mut coords = x.coords().to_vec();
        // 10·Z mm at 100 mm per unit
        coords[3][0] += 10.0 * DEFAULT_Z_MM / 100.0;
        let corrupted = LandmarkSet::new(coords.clone(), 100.0).unwrap();
        let label = regulate(&m, &corrupted, DEFAULT_Z_MM).unwrap();
        assert_eq!(label.branch, Branch::RawWithExclusions);
        assert!(!label.valid[3]);
        assert_eq!(label.coords, coords);
        for (i, (&v, &d)) in label.valid.iter().zip(&label.deviations_mm).enumerate() {
            assert_eq!(v, d <= DEFAULT_Z_MM, "landmark {i}");
        }
    }

    #[test]
    fn adjusted_branch_is_idempotent() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = in_box_shape(&m, 3);
        let coords: Vec<[f64; 2]> = x
            .coords()
            .iter()
            .map(|p| [p[0] + rng.random_range(-0.004..0.004), p[1] + rng.random_range(-0.004..0.004)])
            .collect();
        let first = regulate(&m, &LandmarkSet::new(coords, 100.0).unwrap(), DEFAULT_Z_MM).unwrap();
        assert_eq!(first.branch, Branch::Adjusted);
        let again = regulate(&m, &LandmarkSet::new(first.coords.clone(), 100.0).unwrap(), DEFAULT_Z_MM).unwrap();
        assert_eq!(again.branch, Branch::Adjusted);
        assert!(again.max_deviation_mm < 1e-7);
    }

    #[test]
    fn wrong_landmark_count_is_rejected() {
        let m = model();
        let x = LandmarkSet::unflatten(&ShapeVector::from_points(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 1.0).unwrap();
        assert!(matches!(regulate(&m, &x, 2.0), Err(Error::ShapeMismatch(_))));
    }
}
