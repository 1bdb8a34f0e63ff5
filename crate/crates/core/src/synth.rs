//! Procedural landmark-annotated images with a known low-rank shape law.
//!
//! A sample's shape is `base + Σ_k c_k m_k` with `c_k ~ N(0, std_k²)` and
//! orthonormal modes `m_k` chosen orthogonal to the similarity orbit of the
//! base, so the modes survive Procrustes alignment unchanged. A random pose
//! (scale and rotation about the image centre, then translation) is applied
//! and the image is rendered as soft blobs on a faint closed polyline.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, LandmarkSet, ShapeVector};
use crate::grid::Grid;
use crate::rng;
use crate::shape_model::ShapeModel;

const MAX_POSE_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformMode {
    pub direction: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_rotation: f64,
    pub max_translation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Gaussian blob radius, normalised units.
    pub blob_radius: f64,
    pub contrast: f64,
    pub line_width: f64,
    pub line_intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_shape: ShapeVector,
    pub deform_modes: Vec<DeformMode>,
    pub pose: PoseRanges,
    pub render: RenderSpec,
    pub image_size: usize,
    /// Landmarks of every sample stay inside `[margin, 1 − margin]²`.
    pub margin: f64,
    pub spacing_mm: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Grid,
    pub landmarks: LandmarkSet,
}

const BASE_ANGLES_DEG: [f64; 12] = [0.0, 28.0, 61.0, 95.0, 118.0, 152.0, 183.0, 214.0, 243.0, 275.0, 302.0, 334.0];
const BASE_RADII: [f64; 12] = [0.26, 0.22, 0.28, 0.24, 0.20, 0.27, 0.25, 0.21, 0.29, 0.23, 0.26, 0.22];

/// Twelve landmarks on an irregular polygon around the image centre.
pub fn default_base_shape() -> ShapeVector {
    let pts: Vec<[f64; 2]> = BASE_ANGLES_DEG
        .iter()
        .zip(BASE_RADII)
        .map(|(a, r)| {
            let t = a.to_radians();
            [0.5 + r * t.cos(), 0.5 + r * t.sin()]
        })
        .collect();
    ShapeVector::from_points(&pts)
}

fn orthonormalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    norm
}

/// Smooth orthonormal deformation directions of `base`, orthogonal to its
/// translations, scaling and rotation.
pub fn deformation_modes(base: &ShapeVector, count: usize) -> Result<Vec<Vec<f64>>> {
    let n = base.n_landmarks();
    let c = base.centroid();
    let rel: Vec<[f64; 2]> = base.points().map(|p| [p[0] - c[0], p[1] - c[1]]).collect();
    let flat = |f: &dyn Fn(usize, [f64; 2]) -> [f64; 2]| -> Vec<f64> {
        (0..n).flat_map(|i| f(i, rel[i])).collect::<Vec<f64>>()
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let similarity = [
        flat(&|_, _| [1.0, 0.0]),
        flat(&|_, _| [0.0, 1.0]),
        flat(&|_, p| p),
        flat(&|_, p| [-p[1], p[0]]),
    ];
    for mut v in similarity {
        orthonormalize_against(&mut v, &basis);
        basis.push(v);
    }
    let phase = |p: [f64; 2]| p[1].atan2(p[0]);
    let candidates: [Box<dyn Fn(usize, [f64; 2]) -> [f64; 2]>; 5] = [
        Box::new(|_, p| {
            let w = (2.0 * phase(p)).cos();
            [w * p[0], w * p[1]]
        }),
        Box::new(|_, p| {
            let w = (3.0 * phase(p)).sin();
            [w * p[0], w * p[1]]
        }),
        Box::new(|_, p| {
            let w = (2.0 * phase(p)).sin();
            [-w * p[1], w * p[0]]
        }),
        Box::new(|_, p| {
            let w = (3.0 * phase(p)).cos();
            [w * p[0], w * p[1]]
        }),
        Box::new(|i, _| if i % 2 == 0 { [0.01, 0.0] } else { [0.0, 0.01] }),
    ];
    if count > candidates.len() {
        return Err(Error::InvalidConfig(format!("at most {} deformation modes available", candidates.len())));
    }
    let mut modes = Vec::with_capacity(count);
    for f in candidates.iter().take(count) {
        let mut v = flat(f.as_ref());
        if orthonormalize_against(&mut v, &basis) < 1e-9 {
            return Err(Error::DegenerateShape("deformation candidates are dependent".into()));
        }
        basis.push(v.clone());
        modes.push(v);
    }
    Ok(modes)
}

impl GeneratorSpec {
    /// Twelve landmarks, three modes with stds (0.04, 0.02, 0.01), 64×64 images.
    pub fn default_with_seed(seed: u64) -> Self {
        let base = default_base_shape();
        let stds = [0.04, 0.02, 0.01];
        let modes = deformation_modes(&base, stds.len()).expect("default base is non-degenerate");
        Self {
            base_shape: base,
            deform_modes: modes.into_iter().zip(stds).map(|(direction, std)| DeformMode { direction, std }).collect(),
            pose: PoseRanges { min_scale: 0.9, max_scale: 1.1, max_rotation: 0.2, max_translation: 0.05 },
            render: RenderSpec { blob_radius: 1.5 / 64.0, contrast: 1.0, line_width: 0.6 / 64.0, line_intensity: 0.25 },
            image_size: 64,
            margin: 0.05,
            spacing_mm: 100.0,
            seed,
        }
    }

    pub fn n_landmarks(&self) -> usize {
        self.base_shape.n_landmarks()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.base_shape.values().len();
        if self.n_landmarks() < 3 {
            return Err(Error::InvalidConfig("need at least 3 landmarks".into()));
        }
        for (k, m) in self.deform_modes.iter().enumerate() {
            if m.direction.len() != dim {
                return Err(Error::InvalidConfig(format!("mode {k} has length {} not {dim}", m.direction.len())));
            }
            if !(m.std >= 0.0) {
                return Err(Error::InvalidConfig(format!("mode {k} has negative std")));
            }
            if k > 0 && m.std > self.deform_modes[k - 1].std {
                return Err(Error::InvalidConfig("mode stds must be non-increasing".into()));
            }
            for (j, other) in self.deform_modes.iter().enumerate().take(k + 1) {
                let d: f64 = m.direction.iter().zip(&other.direction).map(|(a, b)| a * b).sum();
                let expect = if j == k { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!("modes {j} and {k} are not orthonormal")));
                }
            }
        }
        let p = &self.pose;
        if !(p.min_scale > 0.0 && p.max_scale >= p.min_scale && p.max_rotation >= 0.0 && p.max_translation >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid pose ranges {p:?}")));
        }
        let r = &self.render;
        if !(r.blob_radius > 0.0 && r.line_width > 0.0 && r.contrast >= 0.0 && r.line_intensity >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid render settings {r:?}")));
        }
        if self.image_size == 0 || !(0.0..0.5).contains(&self.margin) || !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidConfig("invalid image size, margin or spacing".into()));
        }
        Ok(())
    }

    /// Landmark coordinates of sample `index`, before rendering.
    pub fn sample_shape(&self, index: u64) -> Result<LandmarkSet> {
        let mut rng = rng::stream(self.seed, rng::DATA, &[index]);
        let lo = self.margin;
        let hi = 1.0 - self.margin;
        for _ in 0..MAX_POSE_ATTEMPTS {
            let mut shape = self.base_shape.values().to_vec();
            for m in &self.deform_modes {
                let c = if m.std > 0.0 { Normal::new(0.0, m.std).expect("std > 0").sample(&mut rng) } else { 0.0 };
                shape.iter_mut().zip(&m.direction).for_each(|(s, d)| *s += c * d);
            }
            let p = &self.pose;
            let scale = if p.max_scale > p.min_scale { rng.random_range(p.min_scale..=p.max_scale) } else { p.min_scale };
            let rot = if p.max_rotation > 0.0 { rng.random_range(-p.max_rotation..=p.max_rotation) } else { 0.0 };
            let mut shift = [0.0; 2];
            for s in &mut shift {
                if p.max_translation > 0.0 {
                    *s = rng.random_range(-p.max_translation..=p.max_translation);
                }
            }
            let (sin, cos) = rot.sin_cos();
            let coords: Vec<[f64; 2]> = shape
                .chunks_exact(2)
                .map(|q| {
                    let (dx, dy) = (q[0] - 0.5, q[1] - 0.5);
                    [
                        0.5 + scale * (cos * dx - sin * dy) + shift[0],
                        0.5 + scale * (sin * dx + cos * dy) + shift[1],
                    ]
                })
                .collect();
            if coords.iter().all(|c| c.iter().all(|v| (lo..=hi).contains(v))) {
                return LandmarkSet::new(coords, self.spacing_mm);
            }
        }
        Err(Error::InvalidConfig(format!(
            "could not place a sample inside the {} margin; pose or deformation ranges too wide",
            self.margin
        )))
    }

    pub fn render(&self, landmarks: &LandmarkSet) -> Grid {
        render(&self.render, self.image_size, landmarks.coords())
    }
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (a[0] + t * abx - p[0], a[1] + t * aby - p[1]);
    dx * dx + dy * dy
}

/// Soft blobs at the landmarks over a faint closed polyline, clipped to `[0, 1]`.
pub fn render(spec: &RenderSpec, size: usize, coords: &[[f64; 2]]) -> Grid {
    let mut g = Grid::filled(size, size, 0.0);
    let blob = 1.0 / (2.0 * spec.blob_radius * spec.blob_radius);
    let line = 1.0 / (2.0 * spec.line_width * spec.line_width);
    for r in 0..size {
        for c in 0..size {
            let p = g.pixel_center(r, c);
            let mut v: f64 = 0.0;
            for (i, &a) in coords.iter().enumerate() {
                let d2 = (p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2);
                v = v.max(spec.contrast * (-d2 * blob).exp());
                let b = coords[(i + 1) % coords.len()];
                v = v.max(spec.line_intensity * (-segment_distance_sq(p, a, b) * line).exp());
            }
            g.set(r, c, v.min(1.0));
        }
    }
    g
}

/// Samples `start .. start + count`, each seeded independently by its index.
pub fn generate_range(spec: &GeneratorSpec, start: u64, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| {
            let landmarks = spec.sample_shape(i)?;
            Ok(Sample { image: spec.render(&landmarks), landmarks })
        })
        .collect()
}

pub fn generate(spec: &GeneratorSpec, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    generate_range(spec, 0, count)
}

/// Gaussian jitter (std in mm) plus, per landmark with probability
/// `outlier_prob`, a displacement of between 1 and 1.5 × `outlier_mm`.
pub fn corrupt_predictions<R: Rng + ?Sized>(
    truth: &LandmarkSet,
    noise_std_mm: f64,
    outlier_prob: f64,
    outlier_mm: f64,
    rng: &mut R,
) -> Result<LandmarkSet> {
    if !(noise_std_mm >= 0.0) || !(0.0..=1.0).contains(&outlier_prob) || !(outlier_mm >= 0.0) {
        return Err(Error::InvalidInput("corruption parameters must be non-negative".into()));
    }
    let unit = 1.0 / truth.spacing_mm();
    let noise = Normal::new(0.0, noise_std_mm * unit).expect("finite std");
    let coords = truth
        .coords()
        .iter()
        .map(|p| {
            let mut q = *p;
            if noise_std_mm > 0.0 {
                q[0] += noise.sample(rng);
                q[1] += noise.sample(rng);
            }
            if outlier_prob > 0.0 && rng.random::<f64>() < outlier_prob {
                let mag = outlier_mm * unit * rng.random_range(1.0..1.5);
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                q[0] += mag * ang.cos();
                q[1] += mag * ang.sin();
            }
            q
        })
        .collect();
    LandmarkSet::with_mask(coords, truth.valid().to_vec(), truth.spacing_mm())
}

/// Angles in degrees between the span of the generator modes and the span
/// of a model's components, after rotating the modes into the model frame.
pub fn mode_subspace_angles(spec: &GeneratorSpec, model: &ShapeModel) -> Result<Vec<f64>> {
    let dim = spec.base_shape.values().len();
    if model.n_landmarks() != spec.n_landmarks() {
        return Err(Error::ShapeMismatch("model and generator landmark counts differ".into()));
    }
    let mask = vec![true; spec.n_landmarks()];
    let t = procrustes_align(&spec.base_shape, model.mean(), &mask)?;
    let (sin, cos) = t.rotation.sin_cos();
    let k = spec.deform_modes.len();
    let gen = DMatrix::from_fn(dim, k, |r, c| {
        let d = &spec.deform_modes[c].direction;
        let (x, y) = (d[r - r % 2], d[r - r % 2 + 1]);
        if r % 2 == 0 {
            cos * x - sin * y
        } else {
            sin * x + cos * y
        }
    });
    let overlap = gen.transpose() * model.components();
    let sv = overlap.svd(false, false).singular_values;
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(-1.0, 1.0).acos().to_degrees()).collect();
    angles.sort_by(f64::total_cmp);
    // Dimensions the smaller span cannot cover count as orthogonal.
    angles.extend(std::iter::repeat_n(90.0, k.max(model.n_components()) - angles.len()));
    Ok(angles)
}

/// Generator stds expressed in the model's normalised shape units.
pub fn normalized_mode_stds(spec: &GeneratorSpec) -> Vec<f64> {
    let c = spec.base_shape.centroid();
    let norm = spec
        .base_shape
        .points()
        .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
        .sum::<f64>()
        .sqrt();
    spec.deform_modes.iter().map(|m| m.std / norm).collect()
}
