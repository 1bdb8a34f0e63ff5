//! PCA shape prior built from labeled landmark sets.
//!
//! Training shapes are mutually aligned with generalized Procrustes analysis
//! and projected into the tangent space of the mean shape, so that every
//! deviation from the mean is orthogonal to the mean's similarity orbit.
//! A shape `X` is then described as `X = T⁻¹(X̄ + P b)` with `P` column
//! orthonormal, and projection is `b = Pᵀ (T X − X̄)`. `T` is the Procrustes
//! alignment onto `X̄` followed by the tangent rescaling, which keeps it a
//! similarity and makes projection an exact inverse of reconstruction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generalized_procrustes, procrustes_align, LandmarkSet, ShapeVector, SimilarityTransform};

pub use crate::normality::{shapiro_wilk, ShapiroWilk};

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.9999;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Total variance below which the training shapes are considered identical.
const ZERO_VARIANCE_TOL: f64 = 1e-20;
/// Eigenvalues below this fraction of the total are numerical noise.
const NOISE_EIGEN_FRACTION: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    mean: ShapeVector,
    /// 2n × K, orthonormal columns.
    components: DMatrix<f64>,
    sigmas: Vec<f64>,
    variance_fraction: f64,
    n_landmarks: usize,
    n_train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    pub values: Vec<f64>,
    pub transform: SimilarityTransform,
}

/// A freshly built model together with the training statistics behind it.
#[derive(Clone, Debug)]
pub struct ShapeModelFit {
    pub model: ShapeModel,
    /// Fraction of total variance carried by every eigen-direction, descending.
    pub explained_ratio: Vec<f64>,
    /// Per training sample, its K coefficients.
    pub training_coefficients: Vec<Vec<f64>>,
    pub gpa_converged: bool,
}

pub fn build_shape_model(labeled: &[LandmarkSet], variance_target: f64) -> Result<ShapeModel> {
    fit_shape_model(labeled, variance_target).map(|fit| fit.model)
}

pub fn fit_shape_model(labeled: &[LandmarkSet], variance_target: f64) -> Result<ShapeModelFit> {
    if labeled.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a shape model needs at least 2 labeled samples, got {}",
            labeled.len()
        )));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "variance target must lie in (0, 1], got {variance_target}"
        )));
    }
    let n = labeled[0].len();
    for set in labeled {
        if set.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "labeled sets with {} and {} landmarks mixed",
                n,
                set.len()
            )));
        }
        if !set.all_valid() {
            return Err(Error::InvalidInput("labeled landmarks must all be valid".into()));
        }
    }
    let shapes: Vec<ShapeVector> = labeled.iter().map(LandmarkSet::flatten).collect();
    let gpa = generalized_procrustes(&shapes)?;
    let mean = gpa.mean;

    let dim = 2 * n;
    let n_train = shapes.len();
    let tangent: Vec<DVector<f64>> = gpa
        .aligned
        .iter()
        .map(|a| {
            let along = a.dot(&mean);
            if along <= 0.0 {
                return Err(Error::DegenerateShape("aligned shape orthogonal to the mean".into()));
            }
            Ok(DVector::from_iterator(dim, a.values().iter().map(|v| v / along)))
        })
        .collect::<Result<_>>()?;

    let avg = tangent.iter().fold(DVector::zeros(dim), |acc, y| acc + y) / n_train as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for y in &tangent {
        let d = y - &avg;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (n_train - 1) as f64;

    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    if total <= ZERO_VARIANCE_TOL {
        return Err(Error::ZeroVariance);
    }
    let explained_ratio: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();

    let mut k_target = dim;
    let mut cum = 0.0;
    for (k, r) in explained_ratio.iter().enumerate() {
        cum += r;
        if cum >= variance_target - 1e-12 {
            k_target = k + 1;
            break;
        }
    }
    let k_rank = explained_ratio.iter().filter(|&&r| r > NOISE_EIGEN_FRACTION).count();
    let k = k_target.min(k_rank).min(n_train - 1);
    if k == 0 {
        return Err(Error::ZeroVariance);
    }

    let mut components = DMatrix::<f64>::zeros(dim, k);
    for (col, &src) in order.iter().take(k).enumerate() {
        let mut v = eigen.eigenvectors.column(src).into_owned();
        // sign convention: largest-magnitude entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        components.set_column(col, &v);
    }
    let variance_fraction = explained_ratio[..k].iter().sum::<f64>().min(1.0);

    let mut model = ShapeModel {
        mean,
        components,
        sigmas: vec![1.0; k],
        variance_fraction,
        n_landmarks: n,
        n_train,
    };

    let coeffs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| model.project(s).map(|c| c.values))
        .collect::<Result<_>>()?;
    let sigmas: Vec<f64> = (0..k)
        .map(|j| sample_std(coeffs.iter().map(|c| c[j])))
        .collect();
    if sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::ZeroVariance);
    }

    // Empirical spreads can swap near-equal eigenvalues; keep sigmas non-increasing.
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    let permuted = DMatrix::from_fn(dim, k, |r, c| model.components[(r, idx[c])]);
    model.components = permuted;
    model.sigmas = idx.iter().map(|&i| sigmas[i]).collect();
    let training_coefficients = coeffs
        .into_iter()
        .map(|c| idx.iter().map(|&i| c[i]).collect())
        .collect();

    Ok(ShapeModelFit {
        model,
        explained_ratio,
        training_coefficients,
        gpa_converged: gpa.converged,
    })
}

fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

impl ShapeModel {
    pub fn mean(&self) -> &ShapeVector {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn n_components(&self) -> usize {
        self.sigmas.len()
    }

    pub fn variance_fraction(&self) -> f64 {
        self.variance_fraction
    }

    pub fn n_landmarks(&self) -> usize {
        self.n_landmarks
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Pose-normalises `shape` onto the mean and reads off its coefficients.
    pub fn project(&self, shape: &ShapeVector) -> Result<ShapeCoefficients> {
        if shape.n_landmarks() != self.n_landmarks {
            return Err(Error::ShapeMismatch(format!(
                "model has {} landmarks, shape has {}",
                self.n_landmarks,
                shape.n_landmarks()
            )));
        }
        let mask = vec![true; self.n_landmarks];
        let align = procrustes_align(shape, &self.mean, &mask)?;
        let along = align.apply(shape).dot(&self.mean);
        if !(along > 0.0) {
            return Err(Error::DegenerateShape("shape cannot be brought into the mean's tangent space".into()));
        }
        let transform = align.then_scale(1.0 / along);
        let in_frame = transform.apply(shape);
        let dev = DVector::from_iterator(
            2 * self.n_landmarks,
            in_frame.values().iter().zip(self.mean.values()).map(|(a, m)| a - m),
        );
        let values = (self.components.transpose() * dev).iter().copied().collect();
        Ok(ShapeCoefficients { values, transform })
    }

    /// `T⁻¹(X̄ + P b)` in the frame the coefficients were projected from.
    pub fn reconstruct(&self, coeffs: &ShapeCoefficients) -> Result<ShapeVector> {
        if coeffs.values.len() != self.n_components() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} components, got {} coefficients",
                self.n_components(),
                coeffs.values.len()
            )));
        }
        let b = DVector::from_column_slice(&coeffs.values);
        let offset = &self.components * b;
        let in_frame: Vec<f64> = self.mean.values().iter().zip(offset.iter()).map(|(m, d)| m + d).collect();
        Ok(coeffs.transform.inverse().apply(&ShapeVector::new(in_frame)?))
    }

    pub fn to_document(&self) -> ShapeModelDocument {
        let (rows, cols) = self.components.shape();
        let mut row_major = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                row_major.push(self.components[(r, c)]);
            }
        }
        ShapeModelDocument {
            version: MODEL_FORMAT_VERSION,
            n_landmarks: self.n_landmarks,
            mean: self.mean.values().to_vec(),
            components: row_major,
            sigmas: self.sigmas.clone(),
            variance_fraction: self.variance_fraction,
            n_train: self.n_train,
        }
    }

    pub fn from_document(doc: ShapeModelDocument) -> Result<Self> {
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported shape model version {}", doc.version)));
        }
        let dim = 2 * doc.n_landmarks;
        let k = doc.sigmas.len();
        if doc.mean.len() != dim || doc.components.len() != dim * k {
            return Err(Error::Format("shape model arrays disagree with n_landmarks".into()));
        }
        if k == 0 || doc.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format("shape model sigmas must be positive".into()));
        }
        Ok(Self {
            mean: ShapeVector::new(doc.mean)?,
            components: DMatrix::from_row_slice(dim, k, &doc.components),
            sigmas: doc.sigmas,
            variance_fraction: doc.variance_fraction,
            n_landmarks: doc.n_landmarks,
            n_train: doc.n_train,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// On-disk form of a [`ShapeModel`]; `components` is row-major 2n × K.
///
/// serde_json writes floats in shortest round-trip form, so a model survives
/// save/load bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeModelDocument {
    pub version: u32,
    pub n_landmarks: usize,
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub variance_fraction: f64,
    pub n_train: usize,
}

pub fn project(model: &ShapeModel, shape: &ShapeVector) -> Result<ShapeCoefficients> {
    model.project(shape)
}

pub fn reconstruct(model: &ShapeModel, coeffs: &ShapeCoefficients) -> Result<ShapeVector> {
    model.reconstruct(coeffs)
}
