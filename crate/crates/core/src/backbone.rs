//! Minimal differentiable heatmap predictor and its Adam optimiser.
//!
//! The image is mean-pooled to a small feature grid, passed through an affine
//! layer with `tanh`, then a second affine layer producing one logit per
//! heatmap pixel, squashed by a sigmoid. Parameters live in one flat vector:
//!
//! ```text
//! [ layer1_weights (feature_dim × hidden, row-major) | layer1_bias (hidden)
//! | layer2_weights (hidden × n·H·W, row-major)       | layer2_bias (n·H·W) ]
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::heatmap::Heatmap;

/// Logits are clipped here so sigmoid outputs stay strictly inside (0, 1).
const LOGIT_MIN: f64 = -700.0;
const LOGIT_MAX: f64 = 35.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_landmarks: usize,
    pub image_size: usize,
    pub pooled_size: usize,
    pub hidden: usize,
    pub heatmap_size: usize,
}

impl BackboneConfig {
    pub fn new(n_landmarks: usize) -> Self {
        Self { n_landmarks, image_size: 64, pooled_size: 16, hidden: 128, heatmap_size: 32 }
    }

    pub fn feature_dim(&self) -> usize {
        self.pooled_size * self.pooled_size
    }

    pub fn pixels_per_heatmap(&self) -> usize {
        self.heatmap_size * self.heatmap_size
    }

    pub fn output_dim(&self) -> usize {
        self.n_landmarks * self.pixels_per_heatmap()
    }

    pub fn n_params(&self) -> usize {
        let (f, h, o) = (self.feature_dim(), self.hidden, self.output_dim());
        f * h + h + h * o + o
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_landmarks == 0 || self.hidden == 0 || self.heatmap_size == 0 || self.pooled_size == 0 {
            return Err(Error::InvalidConfig("backbone dimensions must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.pooled_size) {
            return Err(Error::InvalidConfig(format!(
                "image size {} is not a multiple of pooled size {}",
                self.image_size, self.pooled_size
            )));
        }
        Ok(())
    }

    fn offsets(&self) -> [usize; 4] {
        let (f, h, o) = (self.feature_dim(), self.hidden, self.output_dim());
        let w1 = 0;
        let b1 = w1 + f * h;
        let w2 = b1 + h;
        let b2 = w2 + h * o;
        [w1, b1, w2, b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    config: BackboneConfig,
    values: Vec<f64>,
}

impl BackboneParams {
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, values: vec![0.0; config.n_params()] })
    }

    /// Weights from `N(0, 1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let [w1, b1, w2, b2] = config.offsets();
        let n1 = Normal::new(0.0, 1.0 / (config.feature_dim() as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, 1.0 / (config.hidden as f64).sqrt()).expect("valid std");
        p.values[w1..b1].iter_mut().for_each(|v| *v = n1.sample(rng));
        p.values[w2..b2].iter_mut().for_each(|v| *v = n2.sample(rng));
        Ok(p)
    }

    pub fn from_values(config: BackboneConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects {} parameters, got {}",
                config.n_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite backbone parameter".into()));
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layer1_weights(&self) -> &[f64] {
        let [w1, b1, _, _] = self.config.offsets();
        &self.values[w1..b1]
    }

    pub fn layer1_bias(&self) -> &[f64] {
        let [_, b1, w2, _] = self.config.offsets();
        &self.values[b1..w2]
    }

    pub fn layer2_weights(&self) -> &[f64] {
        let [_, _, w2, b2] = self.config.offsets();
        &self.values[w2..b2]
    }

    pub fn layer2_bias(&self) -> &[f64] {
        let [_, _, _, b2] = self.config.offsets();
        &self.values[b2..]
    }
}

/// `c = a · b + beta · c` for row-major `a` (m×k), `b` (k×n), `c` (m×n);
/// `a_t` / `b_t` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn sigmoid(logit: f64) -> f64 {
    1.0 / (1.0 + (-logit.clamp(LOGIT_MIN, LOGIT_MAX)).exp())
}

/// Intermediate activations of a batched forward pass, kept for backward.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    batch: usize,
    features: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    outputs: Vec<f64>,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Sigmoid outputs of sample `b`, landmark-major.
    pub fn sample_outputs(&self, config: &BackboneConfig, b: usize) -> &[f64] {
        let o = config.output_dim();
        &self.outputs[b * o..(b + 1) * o]
    }

    /// A pass holding only the given samples, in the given order.
    pub fn select(&self, rows: &[usize]) -> ForwardPass {
        let pick = |v: &[f64]| -> Vec<f64> {
            let width = v.len() / self.batch.max(1);
            rows.iter().flat_map(|&b| &v[b * width..(b + 1) * width]).copied().collect()
        };
        ForwardPass {
            batch: rows.len(),
            features: pick(&self.features),
            hidden: pick(&self.hidden),
            logits: pick(&self.logits),
            outputs: pick(&self.outputs),
        }
    }

    pub fn heatmaps(&self, config: &BackboneConfig, b: usize) -> Vec<Heatmap> {
        let hw = config.heatmap_size;
        self.sample_outputs(config, b)
            .chunks_exact(config.pixels_per_heatmap())
            .map(|c| Heatmap::from_grid_unchecked(Grid::new(hw, hw, c.to_vec()).expect("sized")))
            .collect()
    }
}

fn pooled_features(config: &BackboneConfig, image: &Grid) -> Result<Vec<f64>> {
    if image.height() != config.image_size || image.width() != config.image_size {
        return Err(Error::ShapeMismatch(format!(
            "backbone expects {0}x{0} images, got {1}x{2}",
            config.image_size,
            image.height(),
            image.width()
        )));
    }
    Ok(image.mean_pool(config.pooled_size, config.pooled_size)?.into_data())
}

pub fn forward_batch(params: &BackboneParams, images: &[&Grid]) -> Result<ForwardPass> {
    let cfg = params.config;
    let (f, h, o, bsz) = (cfg.feature_dim(), cfg.hidden, cfg.output_dim(), images.len());
    let mut features = Vec::with_capacity(bsz * f);
    for img in images {
        features.extend(pooled_features(&cfg, img)?);
    }

    let mut hidden: Vec<f64> = params.layer1_bias().iter().cycle().take(bsz * h).copied().collect();
    gemm(bsz, f, h, &features, false, params.layer1_weights(), false, 1.0, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = v.tanh());

    let mut logits: Vec<f64> = params.layer2_bias().iter().cycle().take(bsz * o).copied().collect();
    gemm(bsz, h, o, &hidden, false, params.layer2_weights(), false, 1.0, &mut logits);
    let outputs = logits.iter().map(|&z| sigmoid(z)).collect();

    Ok(ForwardPass { batch: bsz, features, hidden, logits, outputs })
}

/// Heatmaps for one image.
pub fn forward(params: &BackboneParams, image: &Grid) -> Result<Vec<Heatmap>> {
    let pass = forward_batch(params, &[image])?;
    Ok(pass.heatmaps(&params.config, 0))
}

/// Parameter gradients for a batch, given `∂loss/∂output` per sample
/// (landmark-major, one `n·H·W` slice per sample). Contributions are summed
/// over the batch in sample order.
pub fn backward_batch(params: &BackboneParams, pass: &ForwardPass, upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
    let cfg = params.config;
    let (f, h, o, bsz) = (cfg.feature_dim(), cfg.hidden, cfg.output_dim(), pass.batch);
    if upstream.len() != bsz || upstream.iter().any(|u| u.len() != o) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient must be {bsz} slices of {o} values"
        )));
    }
    let mut d_logits = Vec::with_capacity(bsz * o);
    for (b, up) in upstream.iter().enumerate() {
        let base = b * o;
        for (j, &g) in up.iter().enumerate() {
            let z = pass.logits[base + j];
            let y = pass.outputs[base + j];
            let local = if (LOGIT_MIN..=LOGIT_MAX).contains(&z) { y * (1.0 - y) } else { 0.0 };
            d_logits.push(g * local);
        }
    }

    let mut grads = vec![0.0; cfg.n_params()];
    let [w1, b1, w2, b2] = cfg.offsets();
    {
        let (head, tail) = grads.split_at_mut(b2);
        gemm(h, bsz, o, &pass.hidden, true, &d_logits, false, 0.0, &mut head[w2..b2]);
        for row in d_logits.chunks_exact(o) {
            tail.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
        }
    }

    let mut d_hidden = vec![0.0; bsz * h];
    gemm(bsz, o, h, &d_logits, false, params.layer2_weights(), true, 0.0, &mut d_hidden);
    d_hidden.iter_mut().zip(&pass.hidden).for_each(|(d, &a)| *d *= 1.0 - a * a);

    gemm(f, bsz, h, &pass.features, true, &d_hidden, false, 0.0, &mut grads[w1..b1]);
    for row in d_hidden.chunks_exact(h) {
        grads[b1..w2].iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
    }
    Ok(grads)
}

/// Gradients for a single image.
pub fn backward(params: &BackboneParams, image: &Grid, upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
    let pass = forward_batch(params, &[image])?;
    let n = params.config.n_landmarks;
    if upstream.len() != n {
        return Err(Error::ShapeMismatch(format!("expected {n} heatmap gradients, got {}", upstream.len())));
    }
    let flat: Vec<f64> = upstream.iter().flatten().copied().collect();
    backward_batch(params, &pass, &[flat])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, first_moment: vec![0.0; n_params], second_moment: vec![0.0; n_params], step_count: 0 })
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::ShapeMismatch(format!(
                "Adam state for {} parameters given {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        // lr · (m / c1) / (√(v / c2) + eps), with the bias corrections hoisted.
        let k = AdamStep {
            beta1,
            beta2,
            step_size: lr / (1.0 - beta1.powi(t)),
            inv_sqrt_c2: 1.0 / (1.0 - beta2.powi(t)).sqrt(),
            eps,
        };
        adam_update(params, grads, &mut self.first_moment, &mut self.second_moment, &k);
        Ok(())
    }
}

struct AdamStep {
    beta1: f64,
    beta2: f64,
    step_size: f64,
    inv_sqrt_c2: f64,
    eps: f64,
}

fn adam_update(params: &mut [f64], grads: &[f64], first: &mut [f64], second: &mut [f64], k: &AdamStep) {
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
        *m = k.beta1 * *m + (1.0 - k.beta1) * g;
        *v = k.beta2 * *v + (1.0 - k.beta2) * g * g;
        *p -= k.step_size * *m / (v.sqrt() * k.inv_sqrt_c2 + k.eps);
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut BackboneParams, grads: &[f64]) -> Result<()> {
    state.step(&mut params.values, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{l1_coordinate_loss, region_attention_loss, LatentOffsets};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig { n_landmarks: 3, image_size: 16, pooled_size: 8, hidden: 10, heatmap_size: 6 }
    }

    fn image(rng: &mut ChaCha8Rng, size: usize) -> Grid {
        Grid::new(size, size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_half_everywhere() {
        let cfg = BackboneConfig::new(4);
        let p = BackboneParams::zeros(cfg).unwrap();
        let img = Grid::filled(64, 64, 0.3);
        let hs = forward(&p, &img).unwrap();
        assert_eq!(hs.len(), 4);
        assert!(hs.iter().all(|h| h.height() == 32 && h.values().iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn outputs_stay_in_open_unit_interval() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = BackboneParams::init(cfg, &mut rng).unwrap();
        p.values_mut().iter_mut().for_each(|v| *v *= 1e4);
        let img = image(&mut rng, 16);
        for h in forward(&p, &img).unwrap() {
            assert!(h.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BackboneParams::init(cfg, &mut rng).unwrap();
        let img = image(&mut rng, 16);
        let a = forward(&p, &img).unwrap();
        let b = forward(&p, &img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.values().iter().zip(y.values()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let p = BackboneParams::zeros(small_config()).unwrap();
        assert!(matches!(forward(&p, &Grid::filled(8, 8, 0.0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BackboneParams::init(cfg, &mut rng).unwrap();
        let img = image(&mut rng, 16);
        let up = vec![vec![0.0; cfg.pixels_per_heatmap()]; 3];
        assert!(backward(&p, &img, &up).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BackboneParams::init(cfg, &mut rng).unwrap();
        let img = image(&mut rng, 16);
        let n = cfg.pixels_per_heatmap();
        let u1: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let u2: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let sum: Vec<Vec<f64>> =
            u1.iter().zip(&u2).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let g1 = backward(&p, &img, &u1).unwrap();
        let g2 = backward(&p, &img, &u2).unwrap();
        let gs = backward(&p, &img, &sum).unwrap();
        for ((a, b), s) in g1.iter().zip(&g2).zip(&gs) {
            assert!((a + b - s).abs() < 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BackboneParams::init(cfg, &mut rng).unwrap();
        let imgs = [image(&mut rng, 16), image(&mut rng, 16)];
        let o = cfg.output_dim();
        let ups: Vec<Vec<f64>> = (0..2).map(|_| (0..o).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pass = forward_batch(&p, &[&imgs[0], &imgs[1]]).unwrap();
        let both = backward_batch(&p, &pass, &ups).unwrap();
        let single = |i: usize| {
            let pass = forward_batch(&p, &[&imgs[i]]).unwrap();
            backward_batch(&p, &pass, &[ups[i].clone()]).unwrap()
        };
        let (a, b) = (single(0), single(1));
        for ((x, y), s) in a.iter().zip(&b).zip(&both) {
            assert!((x + y - s).abs() < 1e-12 * (1.0 + s.abs()));
        }
    }

    fn chain_loss(p: &BackboneParams, img: &Grid, targets: &[[f64; 2]], offsets: &LatentOffsets) -> (f64, Vec<Vec<f64>>) {
        let hs = forward(p, img).unwrap();
        let ral = region_attention_loss(&hs, targets, &[true; 3], offsets).unwrap();
        let l1 = l1_coordinate_loss(&hs, targets, &[true; 3]).unwrap();
        let grad = ral.grad.iter().zip(&l1.grad).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        (ral.loss + l1.loss, grad)
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = BackboneParams::init(cfg, &mut rng).unwrap();
        let img = image(&mut rng, 16);
        let targets = [[0.3, 0.4], [0.7, 0.2], [0.5, 0.8]];
        let offsets = LatentOffsets { magnitudes: vec![0.01, 0.015, 0.008] };
        let (_, up) = chain_loss(&p, &img, &targets, &offsets);
        let analytic = backward(&p, &img, &up).unwrap();
        let step = 1e-6;
        for _ in 0..50 {
            let k = rng.random_range(0..cfg.n_params());
            let mut plus = p.clone();
            plus.values_mut()[k] += step;
            let mut minus = p.clone();
            minus.values_mut()[k] -= step;
            let numeric =
                (chain_loss(&plus, &img, &targets, &offsets).0 - chain_loss(&minus, &img, &targets, &offsets).0) / (2.0 * step);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-7);
            assert!(rel < 1e-4, "param {k}: analytic {} numeric {numeric}", analytic[k]);
        }
    }

    #[test]
    fn adam_zero_gradient_on_fresh_state_is_a_no_op() {
        let mut state = AdamState::new(AdamConfig::default(), 4).unwrap();
        let mut params = vec![0.5, -1.0, 2.0, 0.0];
        let before = params.clone();
        state.step(&mut params, &[0.0; 4]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut state = AdamState::new(AdamConfig::default(), 1).unwrap();
        let mut params = vec![0.0];
        state.step(&mut params, &[2.0]).unwrap();
        let (m, v) = (state.first_moment[0], state.second_moment[0]);
        state.step(&mut params, &[0.0]).unwrap();
        assert!((state.first_moment[0] - 0.9 * m).abs() < 1e-15);
        assert!((state.second_moment[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut state = AdamState::new(AdamConfig::default(), 3).unwrap();
        let mut params = vec![0.0; 3];
        state.step(&mut params, &[0.5, -3.0, 1e-2]).unwrap();
        // m̂ = g, v̂ = g², so the update is -lr · g / (|g| + eps)
        for (p, g) in params.iter().zip([0.5f64, -3.0, 1e-2]) {
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_steps_at_lr() {
        let mut state = AdamState::new(AdamConfig::default(), 2).unwrap();
        let mut params = vec![1.0, 1.0];
        let grads = [0.3, -0.7];
        let mut prev = params.clone();
        for _ in 0..200 {
            state.step(&mut params, &grads).unwrap();
            for ((p, q), g) in params.iter().zip(&prev).zip(grads) {
                let delta = p - q;
                assert!(delta * g < 0.0);
                assert!((delta.abs() - 1e-3).abs() < 1e-9);
            }
            prev = params.clone();
        }
    }
}
