//! Landmark sets, flat shape vectors and 2D similarity alignment.
//!
//! Shapes are stored interleaved as `(x1, y1, x2, y2, ..., xn, yn)`. All
//! alignment is done with 4-DOF similarity transforms (uniform scale,
//! rotation, translation); reflections are never produced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spread below which a point set is treated as collapsed onto a single point.
const COINCIDENT_TOL: f64 = 1e-12;

pub const GPA_TOLERANCE: f64 = 1e-7;
pub const GPA_MAX_ITERATIONS: usize = 100;

/// Ordered landmark coordinates of one sample plus a per-landmark validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    coords: Vec<[f64; 2]>,
    valid: Vec<bool>,
    spacing_mm: f64,
}

impl LandmarkSet {
    /// All landmarks valid.
    pub fn new(coords: Vec<[f64; 2]>, spacing_mm: f64) -> Result<Self> {
        let valid = vec![true; coords.len()];
        Self::with_mask(coords, valid, spacing_mm)
    }

    pub fn with_mask(coords: Vec<[f64; 2]>, valid: Vec<bool>, spacing_mm: f64) -> Result<Self> {
        if coords.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "a landmark set needs at least 3 landmarks, got {}",
                coords.len()
            )));
        }
        if valid.len() != coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates but {} validity flags",
                coords.len(),
                valid.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite landmark coordinate".into()));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::InvalidInput(format!("spacing_mm must be positive, got {spacing_mm}")));
        }
        Ok(Self { coords, valid, spacing_mm })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn flatten(&self) -> ShapeVector {
        ShapeVector(self.coords.iter().flat_map(|p| [p[0], p[1]]).collect())
    }

    /// Rebuilds a landmark set from a flat shape, all landmarks valid.
    pub fn unflatten(shape: &ShapeVector, spacing_mm: f64) -> Result<Self> {
        Self::new(shape.points().collect(), spacing_mm)
    }
}

/// Flat interleaved shape `(x1, y1, ..., xn, yn)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeVector(Vec<f64>);

impl ShapeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "shape vector length {} is odd",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn from_points(points: &[[f64; 2]]) -> Self {
        Self(points.iter().flat_map(|p| [p[0], p[1]]).collect())
    }

    pub fn zeros(n_landmarks: usize) -> Self {
        Self(vec![0.0; 2 * n_landmarks])
    }

    pub fn n_landmarks(&self) -> usize {
        self.0.len() / 2
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.0[2 * i], self.0[2 * i + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.0.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ShapeVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.n_landmarks() as f64;
        let (sx, sy) = self.points().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// Euclidean distance between two shapes viewed as flat vectors.
    pub fn distance(&self, other: &ShapeVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, factor: f64) -> ShapeVector {
        ShapeVector(self.0.iter().map(|v| v * factor).collect())
    }
}

/// `p -> scale * R(rotation) * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: f64, translation: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("similarity scale must be positive, got {scale}")));
        }
        Ok(Self { scale, rotation, translation })
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: 0.0, translation: [0.0, 0.0] }
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }

    pub fn apply(&self, shape: &ShapeVector) -> ShapeVector {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (self.scale * c, self.scale * s);
        let mut out = Vec::with_capacity(shape.0.len());
        for p in shape.0.chunks_exact(2) {
            out.push(a * p[0] - b * p[1] + self.translation[0]);
            out.push(b * p[0] + a * p[1] + self.translation[1]);
        }
        ShapeVector(out)
    }

    pub fn inverse(&self) -> Self {
        let scale = 1.0 / self.scale;
        let rotation = -self.rotation;
        let (s, c) = rotation.sin_cos();
        let [tx, ty] = self.translation;
        Self {
            scale,
            rotation,
            translation: [-scale * (c * tx - s * ty), -scale * (s * tx + c * ty)],
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &SimilarityTransform) -> Self {
        let t = self.apply_point(first.translation);
        Self {
            scale: self.scale * first.scale,
            rotation: self.rotation + first.rotation,
            translation: t,
        }
    }

    /// Rescales the transform's output about the origin.
    pub fn then_scale(&self, factor: f64) -> Self {
        Self {
            scale: self.scale * factor,
            rotation: self.rotation,
            translation: [self.translation[0] * factor, self.translation[1] * factor],
        }
    }
}

pub fn flatten(set: &LandmarkSet) -> ShapeVector {
    set.flatten()
}

pub fn unflatten(shape: &ShapeVector, spacing_mm: f64) -> Result<LandmarkSet> {
    LandmarkSet::unflatten(shape, spacing_mm)
}

pub fn apply_transform(t: &SimilarityTransform, s: &ShapeVector) -> ShapeVector {
    t.apply(s)
}

/// Least-squares similarity transform taking the valid `source` points onto `target`.
///
/// In 2D the optimum has a closed form: with centred points `a_i`, `b_i`,
/// `scale * cos = Σ a·b / Σ|a|²` and `scale * sin = Σ a×b / Σ|a|²`, which is
/// always a proper rotation.
pub fn procrustes_align(
    source: &ShapeVector,
    target: &ShapeVector,
    mask: &[bool],
) -> Result<SimilarityTransform> {
    let n = source.n_landmarks();
    if target.n_landmarks() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "procrustes: source has {} landmarks, target {}, mask {}",
            n,
            target.n_landmarks(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&v| v).count();
    if count < 3 {
        return Err(Error::DegenerateShape(format!(
            "procrustes needs at least 3 valid landmarks, got {count}"
        )));
    }

    let mut cs = [0.0; 2];
    let mut ct = [0.0; 2];
    for i in (0..n).filter(|&i| mask[i]) {
        let (p, q) = (source.point(i), target.point(i));
        cs[0] += p[0];
        cs[1] += p[1];
        ct[0] += q[0];
        ct[1] += q[1];
    }
    let m = count as f64;
    cs = [cs[0] / m, cs[1] / m];
    ct = [ct[0] / m, ct[1] / m];

    let (mut ss, mut dot, mut cross) = (0.0, 0.0, 0.0);
    for i in (0..n).filter(|&i| mask[i]) {
        let (p, q) = (source.point(i), target.point(i));
        let a = [p[0] - cs[0], p[1] - cs[1]];
        let b = [q[0] - ct[0], q[1] - ct[1]];
        ss += a[0] * a[0] + a[1] * a[1];
        dot += a[0] * b[0] + a[1] * b[1];
        cross += a[0] * b[1] - a[1] * b[0];
    }
    if (ss / m).sqrt() <= COINCIDENT_TOL {
        return Err(Error::DegenerateShape("valid source landmarks are coincident".into()));
    }
    let scale = dot.hypot(cross) / ss;
    if !(scale > COINCIDENT_TOL) {
        return Err(Error::DegenerateShape("target collapses to a point under alignment".into()));
    }
    let rotation = cross.atan2(dot);
    let partial = SimilarityTransform { scale, rotation, translation: [0.0, 0.0] };
    let moved = partial.apply_point(cs);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation: [ct[0] - moved[0], ct[1] - moved[1]],
    })
}

/// Translates to zero centroid and rescales to unit Frobenius norm.
pub fn normalize_shape(shape: &ShapeVector) -> Result<ShapeVector> {
    let c = shape.centroid();
    let mut centred: Vec<f64> = shape
        .0
        .chunks_exact(2)
        .flat_map(|p| [p[0] - c[0], p[1] - c[1]])
        .collect();
    let norm = centred.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= COINCIDENT_TOL {
        return Err(Error::DegenerateShape("shape has no spatial extent".into()));
    }
    centred.iter_mut().for_each(|v| *v /= norm);
    Ok(ShapeVector(centred))
}

/// Rotates a centred shape so that its first non-central landmark lies on the +x axis.
///
/// Fixes the rotational gauge of a consensus shape independently of input order.
fn canonical_orientation(shape: &ShapeVector) -> ShapeVector {
    let max_r = shape.points().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
    let anchor = shape
        .points()
        .find(|p| p[0].hypot(p[1]) > 1e-3 * max_r)
        .unwrap_or([1.0, 0.0]);
    let angle = anchor[1].atan2(anchor[0]);
    SimilarityTransform { scale: 1.0, rotation: -angle, translation: [0.0, 0.0] }.apply(shape)
}

#[derive(Clone, Debug)]
pub struct GpaResult {
    /// Consensus shape: zero centroid, unit norm, canonical orientation.
    pub mean: ShapeVector,
    /// Inputs similarity-aligned onto `mean`.
    pub aligned: Vec<ShapeVector>,
    pub iterations: usize,
    /// False when the iteration cap was reached first; `mean` is then the last iterate.
    pub converged: bool,
}

/// Iterative generalized Procrustes analysis.
pub fn generalized_procrustes(shapes: &[ShapeVector]) -> Result<GpaResult> {
    generalized_procrustes_with(shapes, GPA_TOLERANCE, GPA_MAX_ITERATIONS)
}

pub fn generalized_procrustes_with(
    shapes: &[ShapeVector],
    tolerance: f64,
    max_iterations: usize,
) -> Result<GpaResult> {
    if shapes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "generalized Procrustes needs at least 2 shapes, got {}",
            shapes.len()
        )));
    }
    let n = shapes[0].n_landmarks();
    if let Some(bad) = shapes.iter().find(|s| s.n_landmarks() != n) {
        return Err(Error::ShapeMismatch(format!(
            "shapes with {} and {} landmarks mixed",
            n,
            bad.n_landmarks()
        )));
    }
    let mask = vec![true; n];
    let normalized = shapes.iter().map(normalize_shape).collect::<Result<Vec<_>>>()?;

    // Order-independent starting point: average of individually canonicalised shapes.
    let start: Vec<ShapeVector> = normalized.iter().map(canonical_orientation).collect();
    let mut mean = match average(&start).and_then(|m| normalize_shape(&m).ok()) {
        Some(m) => canonical_orientation(&m),
        None => start[0].clone(),
    };

    let align_all = |mean: &ShapeVector| -> Result<Vec<ShapeVector>> {
        normalized
            .iter()
            .map(|s| Ok(procrustes_align(s, mean, &mask)?.apply(s)))
            .collect()
    };

    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let aligned = align_all(&mean)?;
        let avg = average(&aligned).expect("at least two shapes");
        let next = canonical_orientation(&normalize_shape(&avg)?);
        let change = next.distance(&mean);
        mean = next;
        if change < tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("generalized Procrustes hit {max_iterations} iterations without converging");
    }
    let aligned = align_all(&mean)?;
    Ok(GpaResult { mean, aligned, iterations, converged })
}

fn average(shapes: &[ShapeVector]) -> Option<ShapeVector> {
    let first = shapes.first()?;
    let mut acc = vec![0.0; first.0.len()];
    for s in shapes {
        for (a, v) in acc.iter_mut().zip(&s.0) {
            *a += v;
        }
    }
    let k = shapes.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Some(ShapeVector(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base() -> ShapeVector {
        ShapeVector::from_points(&[
            [0.30, 0.20],
            [0.62, 0.25],
            [0.75, 0.48],
            [0.58, 0.80],
            [0.33, 0.70],
            [0.22, 0.45],
        ])
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        SimilarityTransform {
            scale: rng.random_range(0.5..2.0),
            rotation: rng.random_range(-3.0..3.0),
            translation: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        }
    }

    #[test]
    fn flatten_layout() {
        let set = LandmarkSet::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
        assert_eq!(set.flatten().values(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let back = LandmarkSet::unflatten(&set.flatten(), 1.0).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn flatten_nineteen_landmarks() {
        let coords: Vec<[f64; 2]> = (0..19).map(|i| [i as f64 / 19.0, 0.5 + 0.01 * i as f64]).collect();
        let set = LandmarkSet::new(coords, 0.1).unwrap();
        assert_eq!(set.flatten().values().len(), 38);
    }

    #[test]
    fn landmark_set_rejects_bad_input() {
        assert!(LandmarkSet::new(vec![[0.0, 0.0], [1.0, 1.0]], 1.0).is_err());
        assert!(LandmarkSet::new(vec![[0.0, 0.0], [1.0, f64::NAN], [0.0, 1.0]], 1.0).is_err());
        assert!(LandmarkSet::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.0).is_err());
    }

    #[test]
    fn transform_examples() {
        let s = ShapeVector::from_points(&[[1.0, 0.0]]);
        assert_eq!(SimilarityTransform::identity().apply(&s), s);
        let scaled = SimilarityTransform::new(2.0, 0.0, [0.0, 0.0]).unwrap().apply(&s);
        assert_eq!(scaled.values(), &[2.0, 0.0]);
        let rot = SimilarityTransform::new(1.0, std::f64::consts::FRAC_PI_2, [0.0, 0.0]).unwrap().apply(&s);
        assert!((rot.values()[0]).abs() < 1e-12 && (rot.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let s = base();
            let back = t.inverse().apply(&t.apply(&s));
            assert!(back.distance(&s) < 1e-10);
            let composed = t.inverse().compose(&t).apply(&s);
            assert!(composed.distance(&s) < 1e-10);
        }
    }

    #[test]
    fn self_alignment_is_identity() {
        let s = base();
        let t = procrustes_align(&s, &s, &[true; 6]).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-10);
        assert!(t.rotation.abs() < 1e-10);
        assert!(t.translation[0].abs() < 1e-10 && t.translation[1].abs() < 1e-10);
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t0 = random_transform(&mut rng);
            let s = base();
            let t = procrustes_align(&s, &t0.apply(&s), &[true; 6]).unwrap();
            assert!((t.scale - t0.scale).abs() < 1e-8);
            assert!((t.rotation - t0.rotation).abs() < 1e-8);
            assert!((t.translation[0] - t0.translation[0]).abs() < 1e-8);
            assert!((t.translation[1] - t0.translation[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_alignment_equals_reduced_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = base();
        let mut tgt = random_transform(&mut rng).apply(&src);
        for v in tgt.values_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
        // wreck landmark 2 in the target, then mask it out
        tgt.values_mut()[4] += 5.0;
        let mut mask = [true; 6];
        mask[2] = false;
        let masked = procrustes_align(&src, &tgt, &mask).unwrap();

        let keep: Vec<usize> = (0..6).filter(|&i| i != 2).collect();
        let reduce = |s: &ShapeVector| {
            ShapeVector::from_points(&keep.iter().map(|&i| s.point(i)).collect::<Vec<_>>())
        };
        let reduced = procrustes_align(&reduce(&src), &reduce(&tgt), &[true; 5]).unwrap();
        assert!((masked.scale - reduced.scale).abs() < 1e-12);
        assert!((masked.rotation - reduced.rotation).abs() < 1e-12);
        assert!((masked.translation[0] - reduced.translation[0]).abs() < 1e-12);
        assert!((masked.translation[1] - reduced.translation[1]).abs() < 1e-12);
    }

    #[test]
    fn coincident_source_is_degenerate() {
        let src = ShapeVector::from_points(&[[0.5, 0.5]; 4]);
        let err = procrustes_align(&src, &base_four(), &[true; 4]).unwrap_err();
        assert!(matches!(err, Error::DegenerateShape(_)));
        let too_few = procrustes_align(&base_four(), &base_four(), &[true, true, false, false]);
        assert!(matches!(too_few, Err(Error::DegenerateShape(_))));
    }

    fn base_four() -> ShapeVector {
        ShapeVector::from_points(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.2, 0.9]])
    }

    #[test]
    fn alignment_invariant_to_pre_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = base();
        let mut target = random_transform(&mut rng).apply(&s);
        for v in target.values_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let shift = SimilarityTransform { scale: 1.0, rotation: 0.0, translation: [0.7, -0.3] };
        let original = procrustes_align(&s, &target, &[true; 6]).unwrap();
        let shifted = procrustes_align(&shift.apply(&s), &target, &[true; 6]).unwrap();
        let a = original.apply(&s);
        let b = shifted.compose(&shift).apply(&s);
        assert!(a.distance(&b) < 1e-9);
    }

    #[test]
    fn gpa_identical_shapes() {
        let s = base();
        let out = generalized_procrustes(&[s.clone(), s.clone()]).unwrap();
        assert!(out.converged);
        let normalized = normalize_shape(&s).unwrap();
        // same up to the canonical rotation
        let t = procrustes_align(&normalized, &out.mean, &[true; 6]).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-10);
        assert!(t.apply(&normalized).distance(&out.mean) < 1e-10);
        for a in &out.aligned {
            assert!(a.distance(&out.mean) < 1e-10);
        }
    }

    #[test]
    fn gpa_mean_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shapes: Vec<ShapeVector> = (0..10)
            .map(|_| {
                let mut s = random_transform(&mut rng).apply(&base());
                s.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.03..0.03));
                s
            })
            .collect();
        let out = generalized_procrustes(&shapes).unwrap();
        let c = out.mean.centroid();
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        assert!((out.mean.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gpa_similarity_family_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shapes: Vec<ShapeVector> =
            (0..8).map(|_| random_transform(&mut rng).apply(&base())).collect();
        let out = generalized_procrustes(&shapes).unwrap();
        for a in &out.aligned {
            assert!(a.distance(&out.mean) < 1e-8);
        }
    }

    #[test]
    fn gpa_iteration_cap_flags_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shapes: Vec<ShapeVector> = (0..6)
            .map(|_| {
                let mut s = random_transform(&mut rng).apply(&base());
                s.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
                s
            })
            .collect();
        let out = generalized_procrustes_with(&shapes, 0.0, 3).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
        assert_eq!(out.aligned.len(), 6);
    }

    #[test]
    fn gpa_rejects_single_shape() {
        assert!(matches!(generalized_procrustes(&[base()]), Err(Error::InsufficientData(_))));
    }
}
