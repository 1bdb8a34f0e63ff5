//! Heatmaps, integral (soft-argmax) decoding and the losses defined on them.
//!
//! Pixel `(r, c)` of an `H × W` heatmap sits at `((c + 0.5) / W, (r + 0.5) / H)`.
//! Decoding returns `Σ h(ρ) ρ / γ` with `γ = Σ h(ρ)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const OFFSET_MEAN: f64 = 0.01;
pub const OFFSET_STD: f64 = 0.005;

/// Added to every normalisation sum.
const GAMMA_EPS: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap(Grid);

impl Heatmap {
    /// Sigmoid-range heatmap: every value strictly inside (0, 1).
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidInput("heatmap values must lie strictly in (0, 1)".into()));
        }
        Ok(Self(grid))
    }

    /// Any strictly positive finite surface, e.g. pre-activation scalings.
    pub fn from_positive(grid: Grid) -> Result<Self> {
        if grid.data().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("heatmap values must be positive and finite".into()));
        }
        Ok(Self(grid))
    }

    pub(crate) fn from_grid_unchecked(grid: Grid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        let (h, w) = (self.height(), self.width());
        (0..h * w).map(move |k| [((k % w) as f64 + 0.5) / w as f64, ((k / w) as f64 + 0.5) / h as f64])
    }

    /// `γ = Σ h(ρ)` with compensated accumulation.
    pub fn mass(&self) -> f64 {
        neumaier_sum(self.values().iter().copied()) + GAMMA_EPS
    }
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Integral decoding: the heatmap's normalised expectation of pixel position.
pub fn decode(h: &Heatmap) -> [f64; 2] {
    let gamma = h.mass();
    let sx = neumaier_sum(h.values().iter().zip(h.centers()).map(|(v, p)| v * p[0]));
    let sy = neumaier_sum(h.values().iter().zip(h.centers()).map(|(v, p)| v * p[1]));
    [sx / gamma, sy / gamma]
}

/// Magnitudes `|δ_i|` of the offsets between pseudo labels and the unknown truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentOffsets {
    pub magnitudes: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetDistribution {
    pub mean: f64,
    pub std: f64,
}

impl Default for OffsetDistribution {
    fn default() -> Self {
        Self { mean: OFFSET_MEAN, std: OFFSET_STD }
    }
}

impl OffsetDistribution {
    /// `n` draws from `N(mean, std²)`, non-positive draws rejected and redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<LatentOffsets> {
        if n == 0 {
            return Err(Error::InvalidInput("need at least one offset".into()));
        }
        let normal = Normal::new(self.mean, self.std)
            .map_err(|e| Error::InvalidConfig(format!("offset distribution: {e}")))?;
        if self.mean + 8.0 * self.std <= 0.0 {
            return Err(Error::InvalidConfig("offset distribution has no positive mass".into()));
        }
        let magnitudes = (0..n)
            .map(|_| loop {
                let v = normal.sample(rng);
                if v > 0.0 {
                    break v;
                }
            })
            .collect();
        Ok(LatentOffsets { magnitudes })
    }
}

/// Offsets from the default `N(0.01, 0.005²)` distribution.
pub fn sample_offsets<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<LatentOffsets> {
    OffsetDistribution::default().sample(n, rng)
}

/// Loss value and its gradient with respect to every heatmap value.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
}

fn check_counts(heatmaps: &[Heatmap], targets: &[[f64; 2]], valid: &[bool]) -> Result<()> {
    if heatmaps.len() != targets.len() || valid.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} heatmaps, {} targets, {} validity flags",
            heatmaps.len(),
            targets.len(),
            valid.len()
        )));
    }
    Ok(())
}

/// Region Attention loss `Σ_i | |δ_i| − Σ_ρ h_i(ρ)/γ_i · ‖ρ − x_i‖ |` over valid landmarks.
pub fn region_attention_loss(
    heatmaps: &[Heatmap],
    targets: &[[f64; 2]],
    valid: &[bool],
    offsets: &LatentOffsets,
) -> Result<LossGrad> {
    check_counts(heatmaps, targets, valid)?;
    if offsets.magnitudes.len() != heatmaps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} heatmaps but {} offsets",
            heatmaps.len(),
            offsets.magnitudes.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(heatmaps.len());
    for (i, h) in heatmaps.iter().enumerate() {
        if !valid[i] {
            grad.push(vec![0.0; h.values().len()]);
            continue;
        }
        let x = targets[i];
        let dist: Vec<f64> = h.centers().map(|p| ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2)).sqrt()).collect();
        let gamma = h.mass();
        let expected = neumaier_sum(h.values().iter().zip(&dist).map(|(v, d)| v * d)) / gamma;
        let residual = offsets.magnitudes[i] - expected;
        loss += residual.abs();
        // d|r|/dh = -sign(r) · (d(ρ) - E) / γ
        let s = sign(residual);
        grad.push(dist.iter().map(|d| -s * (d - expected) / gamma).collect());
    }
    Ok(LossGrad { loss, grad })
}

/// `Σ_i ‖decode(h_i) − g_i‖₁` over valid landmarks.
pub fn l1_coordinate_loss(heatmaps: &[Heatmap], targets: &[[f64; 2]], valid: &[bool]) -> Result<LossGrad> {
    check_counts(heatmaps, targets, valid)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(heatmaps.len());
    for (i, h) in heatmaps.iter().enumerate() {
        if !valid[i] {
            grad.push(vec![0.0; h.values().len()]);
            continue;
        }
        let u = decode(h);
        let g = targets[i];
        let (ex, ey) = (u[0] - g[0], u[1] - g[1]);
        loss += ex.abs() + ey.abs();
        let gamma = h.mass();
        let (sx, sy) = (sign(ex), sign(ey));
        grad.push(h.centers().map(|p| (sx * (p[0] - u[0]) + sy * (p[1] - u[1])) / gamma).collect());
    }
    Ok(LossGrad { loss, grad })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(h: usize, w: usize, f: impl Fn([f64; 2]) -> f64) -> Grid {
        let mut g = Grid::filled(h, w, 0.0);
        for r in 0..h {
            for c in 0..w {
                let p = g.pixel_center(r, c);
                g.set(r, c, f(p));
            }
        }
        g
    }

    fn random_heatmap(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Heatmap {
        let data = (0..h * w).map(|_| rng.random_range(0.01..0.99)).collect();
        Heatmap::new(Grid::new(h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn near_delta_decodes_to_its_pixel() {
        // 2 rows x 5 columns: pixel (0, 2) is centred at (0.5, 0.25)
        let mut g = Grid::filled(2, 5, 1e-9);
        g.set(0, 2, 0.999);
        let u = decode(&Heatmap::new(g).unwrap());
        assert!((u[0] - 0.5).abs() < 1e-5 && (u[1] - 0.25).abs() < 1e-5, "{u:?}");
    }

    #[test]
    fn uniform_heatmap_decodes_to_centre() {
        let u = decode(&Heatmap::new(Grid::filled(32, 32, 0.5)).unwrap());
        assert!((u[0] - 0.5).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
        let u = decode(&Heatmap::new(Grid::filled(7, 13, 0.3)).unwrap());
        assert!((u[0] - 0.5).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_bump_decodes_to_its_centre() {
        for c in [[0.5, 0.5], [0.41, 0.57], [0.6, 0.37]] {
            let g = grid_from(64, 64, |p| {
                let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                (-d2 / (2.0 * 0.04f64.powi(2))).exp() * 0.98 + 1e-12
            });
            let u = decode(&Heatmap::new(g).unwrap());
            assert!((u[0] - c[0]).abs() < 1e-4 && (u[1] - c[1]).abs() < 1e-4, "{u:?} vs {c:?}");
        }
    }

    #[test]
    fn decode_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_heatmap(&mut rng, 9, 11);
        let u = decode(&h);
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = Grid::new(9, 11, h.values().iter().map(|v| v * c).collect()).unwrap();
            let v = decode(&Heatmap::from_positive(scaled).unwrap());
            assert!((u[0] - v[0]).abs() < 1e-12 && (u[1] - v[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn offsets_are_positive_and_deterministic() {
        let a = sample_offsets(1000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_offsets(1000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.magnitudes.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn offset_mean_matches_truncated_distribution() {
        let draws = sample_offsets(100_000, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let mean = draws.magnitudes.iter().sum::<f64>() / 1e5;
        assert!((0.0095..=0.0105).contains(&mean), "{mean}");
    }

    #[test]
    fn ring_of_mass_at_offset_radius_gives_zero_term() {
        // Mass only on the four pixels adjacent to the centre of an even grid,
        // all at the same distance from x = (0.5, 0.5).
        let n = 8;
        let mut g = Grid::filled(n, n, 1e-300);
        for (r, c) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            g.set(r, c, 0.9);
        }
        let h = Heatmap::from_positive(g).unwrap();
        let radius = (2.0f64 * (0.5 / n as f64).powi(2)).sqrt();
        let offsets = LatentOffsets { magnitudes: vec![radius] };
        let out = region_attention_loss(&[h], &[[0.5, 0.5]], &[true], &offsets).unwrap();
        assert!(out.loss < 1e-12, "{}", out.loss);
    }

    #[test]
    fn near_delta_at_label_gives_offset_magnitude() {
        let mut g = Grid::filled(16, 16, 1e-12);
        g.set(5, 9, 0.999);
        let h = Heatmap::new(g).unwrap();
        let x = h.grid().pixel_center(5, 9);
        let offsets = LatentOffsets { magnitudes: vec![0.01] };
        let out = region_attention_loss(&[h], &[x], &[true], &offsets).unwrap();
        assert!((out.loss - 0.01).abs() < 1e-8);
    }

    fn finite_difference_check(
        f: impl Fn(&[Heatmap]) -> LossGrad,
        heatmaps: &[Heatmap],
        tol: f64,
    ) {
        let analytic = f(heatmaps);
        let step = 1e-6;
        for (i, h) in heatmaps.iter().enumerate() {
            for k in 0..h.values().len() {
                let perturb = |delta: f64| {
                    let mut hs = heatmaps.to_vec();
                    let mut data = hs[i].values().to_vec();
                    data[k] += delta;
                    hs[i] = Heatmap::from_positive(Grid::new(h.height(), h.width(), data).unwrap()).unwrap();
                    f(&hs).loss
                };
                let numeric = (perturb(step) - perturb(-step)) / (2.0 * step);
                let a = analytic.grad[i][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < tol, "landmark {i} pixel {k}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn region_attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let hs: Vec<Heatmap> = (0..3).map(|_| random_heatmap(&mut rng, 8, 8)).collect();
            let targets: Vec<[f64; 2]> = (0..3).map(|_| [rng.random(), rng.random()]).collect();
            let offsets = sample_offsets(3, &mut rng).unwrap();
            finite_difference_check(
                |h| region_attention_loss(h, &targets, &[true, true, true], &offsets).unwrap(),
                &hs,
                1e-5,
            );
        }
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..5 {
            let hs: Vec<Heatmap> = (0..3).map(|_| random_heatmap(&mut rng, 8, 8)).collect();
            let targets: Vec<[f64; 2]> = (0..3).map(|_| [rng.random(), rng.random()]).collect();
            finite_difference_check(|h| l1_coordinate_loss(h, &targets, &[true; 3]).unwrap(), &hs, 1e-5);
        }
    }

    #[test]
    fn l1_loss_examples() {
        let h = Heatmap::new(Grid::filled(8, 8, 0.4)).unwrap();
        let exact = l1_coordinate_loss(std::slice::from_ref(&h), &[[0.5, 0.5]], &[true]).unwrap();
        assert!(exact.loss.abs() < 1e-12);
        assert!(exact.grad[0].iter().all(|g| g.abs() < 1e-12));
        let off = l1_coordinate_loss(&[h], &[[0.4, 0.5]], &[true]).unwrap();
        assert!((off.loss - 0.1).abs() < 1e-12);
    }

    #[test]
    fn masked_landmarks_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hs: Vec<Heatmap> = (0..3).map(|_| random_heatmap(&mut rng, 6, 6)).collect();
        let targets = [[0.3, 0.3], [0.6, 0.4], [0.5, 0.8]];
        let offsets = LatentOffsets { magnitudes: vec![0.01, 0.02, 0.015] };
        let all = region_attention_loss(&hs, &targets, &[true; 3], &offsets).unwrap();
        let masked = region_attention_loss(&hs, &targets, &[true, false, true], &offsets).unwrap();
        let only_mid = region_attention_loss(&hs[1..2], &targets[1..2], &[true], &LatentOffsets { magnitudes: vec![0.02] }).unwrap();
        assert!((all.loss - masked.loss - only_mid.loss).abs() < 1e-14);
        assert_eq!(all.grad[0], masked.grad[0]);
        assert_eq!(all.grad[2], masked.grad[2]);
        assert!(masked.grad[1].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_is_translation_invariant_on_the_grid() {
        let n = 16;
        let bump = |cx: f64, cy: f64| {
            grid_from(n, n, move |p| {
                let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
                if d2 < 0.15f64.powi(2) {
                    0.05 + 0.9 * (-d2 / 0.002).exp()
                } else {
                    1e-200
                }
            })
        };
        let shift = 3.0 / n as f64;
        let x = [0.40625, 0.46875];
        let offsets = LatentOffsets { magnitudes: vec![0.012] };
        let a = region_attention_loss(&[Heatmap::from_positive(bump(0.4, 0.45)).unwrap()], &[x], &[true], &offsets).unwrap();
        let b = region_attention_loss(
            &[Heatmap::from_positive(bump(0.4 + shift, 0.45 + shift)).unwrap()],
            &[[x[0] + shift, x[1] + shift]],
            &[true],
            &offsets,
        )
        .unwrap();
        assert!((a.loss - b.loss).abs() < 1e-10);
    }
}
