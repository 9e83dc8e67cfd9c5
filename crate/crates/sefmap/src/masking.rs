//! Distribution-aware masking: EMA feature statistics, Gaussian surrogate
//! grids, and the three training passes.
//!
//! During training we track per-channel mean and variance of each
//! modality's BEV features as exponential moving averages. A masked pass
//! replaces one modality with cells drawn independently from the tracked
//! Gaussian, so the network sees a "missing sensor" whose statistics still
//! look plausible. Each training step runs the intact pass plus one pass
//! per masked modality; all three share parameters and one tape so the
//! specialization losses can compare them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SefError};
use crate::model::{forward, PassTrace, SefModel};
use crate::numerics::{ParamStore, Real, Tape, Tensor};

/// Variances are floored here after every update so surrogate sampling
/// never degenerates.
pub const VAR_FLOOR: Real = 1e-6;

/// Running per-channel Gaussian estimate of one modality's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaStats {
    pub mu: Vec<Real>,
    pub var: Vec<Real>,
    pub decay: Real,
    pub initialized: bool,
}

impl EmaStats {
    pub fn new(channels: usize, decay: Real) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(SefError::Config(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        if channels == 0 {
            return Err(SefError::Config("EMA stats need at least one channel".into()));
        }
        Ok(EmaStats {
            mu: vec![0.0; channels],
            var: vec![0.0; channels],
            decay,
            initialized: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Fold one batch of stacked cell rows [n, C] into the running
    /// estimate. The first call adopts the batch statistics directly.
    pub fn update(&mut self, rows: &Tensor) -> Result<()> {
        let (n, c) = rows.shape();
        if c != self.channels() {
            return Err(SefError::shape(
                "ema_update",
                format!("{} channels", self.channels()),
                format!("{c}"),
            ));
        }
        if n == 0 {
            return Err(SefError::Config("ema_update needs at least one row".into()));
        }
        let inv = 1.0 / n as Real;
        for ch in 0..c {
            let mut mean = 0.0;
            for i in 0..n {
                mean += rows.get(i, ch);
            }
            mean *= inv;
            let mut var = 0.0;
            for i in 0..n {
                let d = rows.get(i, ch) - mean;
                var += d * d;
            }
            var = (var * inv).max(VAR_FLOOR);
            if self.initialized {
                self.mu[ch] = self.decay * self.mu[ch] + (1.0 - self.decay) * mean;
                self.var[ch] = (self.decay * self.var[ch] + (1.0 - self.decay) * var)
                    .max(VAR_FLOOR);
            } else {
                self.mu[ch] = mean;
                self.var[ch] = var;
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Draw a surrogate feature stack [rows, C], each cell independent
    /// N(mu, diag(var)).
    pub fn sample_surrogate<R: Rng>(&self, rows: usize, rng: &mut R) -> Result<Tensor> {
        if !self.initialized {
            return Err(SefError::domain(
                "sample_surrogate",
                "statistics not initialized; run warm-up update steps before masking",
            ));
        }
        let c = self.channels();
        let mut out = Tensor::zeros(rows, c);
        for i in 0..rows {
            for ch in 0..c {
                let z: f64 = rng.sample(StandardNormal);
                out.set(i, ch, self.mu[ch] + self.var[ch].sqrt() * z as Real);
            }
        }
        Ok(out)
    }
}

/// Both modalities' running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingStats {
    pub lidar: EmaStats,
    pub image: EmaStats,
}

impl MaskingStats {
    pub fn new(channels: usize, decay: Real) -> Result<Self> {
        Ok(MaskingStats {
            lidar: EmaStats::new(channels, decay)?,
            image: EmaStats::new(channels, decay)?,
        })
    }

    pub fn initialized(&self) -> bool {
        self.lidar.initialized && self.image.initialized
    }
}

/// The three training passes of one step. Masked passes are absent during
/// warm-up, before the statistics exist.
#[derive(Debug, Clone)]
pub struct PassOutputs {
    pub intact: PassTrace,
    pub image_masked: Option<PassTrace>,
    pub lidar_masked: Option<PassTrace>,
}

impl PassOutputs {
    pub fn masked(&self) -> Option<(&PassTrace, &PassTrace)> {
        match (&self.image_masked, &self.lidar_masked) {
            (Some(im), Some(lm)) => Some((im, lm)),
            _ => None,
        }
    }
}

/// Run the intact pass and, when the statistics are ready, the two masked
/// passes with freshly sampled surrogates. All passes share `tape` and
/// `store`, so gradients from every pass land on the same parameters.
pub fn tri_pass<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    model: &SefModel,
    lidar: &Tensor,
    image: &Tensor,
    stats: &MaskingStats,
    rng: &mut R,
) -> Result<PassOutputs> {
    if !stats.initialized() {
        let l = tape.input(lidar.clone())?;
        let v = tape.input(image.clone())?;
        let intact = forward(tape, store, model, l, v)?;
        return Ok(PassOutputs { intact, image_masked: None, lidar_masked: None });
    }
    let rows = lidar.rows();
    let image_surrogate = stats.image.sample_surrogate(rows, rng)?;
    let lidar_surrogate = stats.lidar.sample_surrogate(rows, rng)?;
    tri_pass_with_surrogates(tape, store, model, lidar, image, &image_surrogate, &lidar_surrogate)
}

/// The deterministic core of `tri_pass`: run all three passes with caller
/// supplied surrogate grids. Exposed so tests can inject exact surrogates
/// (and it keeps finite-difference evaluation reproducible).
pub fn tri_pass_with_surrogates(
    tape: &mut Tape,
    store: &ParamStore,
    model: &SefModel,
    lidar: &Tensor,
    image: &Tensor,
    image_surrogate: &Tensor,
    lidar_surrogate: &Tensor,
) -> Result<PassOutputs> {
    let l = tape.input(lidar.clone())?;
    let v = tape.input(image.clone())?;
    let intact = forward(tape, store, model, l, v)?;

    let v_sur = tape.input(image_surrogate.clone())?;
    let image_masked = forward(tape, store, model, l, v_sur)?;

    let l_sur = tape.input(lidar_surrogate.clone())?;
    let lidar_masked = forward(tape, store, model, l_sur, v)?;

    Ok(PassOutputs {
        intact,
        image_masked: Some(image_masked),
        lidar_masked: Some(lidar_masked),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SefModel};
    use crate::numerics::randn;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn first_update_adopts_batch_statistics() {
        let mut stats = EmaStats::new(2, 0.99).unwrap();
        let rows = Tensor::from_vec(4, 2, vec![1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap();
        stats.update(&rows).unwrap();
        assert_abs_diff_eq!(stats.mu[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.var[0], 1.0, epsilon = 1e-12);
        // constant channel hits the variance floor
        assert_abs_diff_eq!(stats.mu[1], 0.0, epsilon = 1e-12);
        assert_eq!(stats.var[1], VAR_FLOOR);
    }

    #[test]
    fn ema_blends_with_configured_decay() {
        let mut stats = EmaStats::new(1, 0.99).unwrap();
        stats.update(&Tensor::zeros(8, 1)).unwrap();
        assert_abs_diff_eq!(stats.mu[0], 0.0, epsilon = 1e-15);
        let ones = Tensor::filled(8, 1, 1.0);
        stats.update(&ones).unwrap();
        // 0.99 * 0 + 0.01 * 1
        assert_abs_diff_eq!(stats.mu[0], 0.01, epsilon = 1e-12);
    }

    #[test]
    fn repeated_identical_updates_are_a_fixed_point() {
        let mut r = rng(0);
        let rows = randn(&mut r, 32, 3, 1.0);
        let mut stats = EmaStats::new(3, 0.9).unwrap();
        stats.update(&rows).unwrap();
        let mu_after_one = stats.mu.clone();
        let var_after_one = stats.var.clone();
        stats.update(&rows).unwrap();
        for ch in 0..3 {
            assert_abs_diff_eq!(stats.mu[ch], mu_after_one[ch], epsilon = 1e-12);
            assert_abs_diff_eq!(stats.var[ch], var_after_one[ch], epsilon = 1e-12);
        }
    }

    #[test]
    fn ema_contracts_toward_constant_batch_mean() {
        let mut stats = EmaStats::new(1, 0.9).unwrap();
        stats.update(&Tensor::filled(4, 1, 10.0)).unwrap();
        let target = Tensor::filled(4, 1, 2.0);
        let mut gap = (stats.mu[0] - 2.0).abs();
        for _ in 0..20 {
            stats.update(&target).unwrap();
            let next = (stats.mu[0] - 2.0).abs();
            assert!(next <= 0.9 * gap + 1e-12, "contraction violated: {gap} -> {next}");
            gap = next;
        }
    }

    #[test]
    fn sampling_requires_initialization_and_is_seeded() {
        let stats = EmaStats::new(2, 0.99).unwrap();
        assert!(stats.sample_surrogate(4, &mut rng(0)).is_err());

        let mut stats = stats;
        let mut r = rng(1);
        stats.update(&randn(&mut r, 64, 2, 1.0)).unwrap();
        let a = stats.sample_surrogate(10, &mut rng(7)).unwrap();
        let b = stats.sample_surrogate(10, &mut rng(7)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = stats.sample_surrogate(10, &mut rng(8)).unwrap();
        assert!(a.data() != c.data());
    }

    #[test]
    fn surrogates_reproduce_tracked_statistics() {
        // mu = 0, var = 1 configuration; tolerances are 4 sigma of the
        // estimators at 1e4 draws
        let mut stats = EmaStats::new(3, 0.99).unwrap();
        stats.initialized = true;
        stats.mu = vec![0.0; 3];
        stats.var = vec![1.0; 3];
        let draws = stats.sample_surrogate(10_000, &mut rng(3)).unwrap();
        for ch in 0..3 {
            let n = draws.rows() as Real;
            let mean: Real = (0..draws.rows()).map(|i| draws.get(i, ch)).sum::<Real>() / n;
            let var: Real =
                (0..draws.rows()).map(|i| (draws.get(i, ch) - mean).powi(2)).sum::<Real>() / n;
            assert!(mean.abs() < 0.05, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 0.06, "channel {ch} variance {var}");
        }
    }

    #[test]
    fn floored_variance_keeps_samples_near_mean() {
        let mut stats = EmaStats::new(1, 0.99).unwrap();
        stats.update(&Tensor::filled(16, 1, 5.0)).unwrap();
        assert_eq!(stats.var[0], VAR_FLOOR);
        let draws = stats.sample_surrogate(100, &mut rng(4)).unwrap();
        for &v in draws.data() {
            assert!((v - 5.0).abs() < 10.0 * VAR_FLOOR.sqrt(), "sample strayed: {v}");
        }
    }

    fn small_model(seed: u64) -> (ParamStore, SefModel) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let cfg = ModelConfig { channels: 8, rank: 2, ..ModelConfig::default() };
        let model = SefModel::register(&mut store, &mut r, &cfg).unwrap();
        (store, model)
    }

    #[test]
    fn warmup_runs_intact_only() {
        let (store, model) = small_model(10);
        let stats = MaskingStats::new(8, 0.99).unwrap();
        let mut r = rng(11);
        let lidar = randn(&mut r, 12, 8, 1.0);
        let image = randn(&mut r, 12, 8, 1.0);
        let mut tape = Tape::new();
        let out = tri_pass(&mut tape, &store, &model, &lidar, &image, &stats, &mut r).unwrap();
        assert!(out.image_masked.is_none() && out.lidar_masked.is_none());
        assert!(out.masked().is_none());
    }

    #[test]
    fn injected_actual_features_reproduce_intact_pass() {
        let (store, model) = small_model(12);
        let mut r = rng(13);
        let lidar = randn(&mut r, 9, 8, 1.0);
        let image = randn(&mut r, 9, 8, 1.0);
        let mut tape = Tape::new();
        let out = tri_pass_with_surrogates(
            &mut tape, &store, &model, &lidar, &image, &image, &lidar,
        )
        .unwrap();
        let intact = tape.value(out.intact.prediction);
        let im = tape.value(out.image_masked.as_ref().unwrap().prediction);
        let lm = tape.value(out.lidar_masked.as_ref().unwrap().prediction);
        assert_eq!(intact.data(), im.data());
        assert_eq!(intact.data(), lm.data());
    }

    #[test]
    fn masked_passes_differ_from_intact_under_real_surrogates() {
        let (store, model) = small_model(14);
        let mut r = rng(15);
        let mut stats = MaskingStats::new(8, 0.99).unwrap();
        stats.lidar.update(&randn(&mut r, 128, 8, 1.0)).unwrap();
        stats.image.update(&randn(&mut r, 128, 8, 1.0)).unwrap();
        let lidar = randn(&mut r, 9, 8, 1.0);
        let image = randn(&mut r, 9, 8, 1.0);
        let mut tape = Tape::new();
        let out = tri_pass(&mut tape, &store, &model, &lidar, &image, &stats, &mut r).unwrap();
        let (im, lm) = out.masked().unwrap();
        let intact = tape.value(out.intact.prediction);
        assert!(intact.data() != tape.value(im.prediction).data());
        assert!(intact.data() != tape.value(lm.prediction).data());
        // the intact pass's raw inputs are untouched by masking
        assert_eq!(tape.value(out.intact.lidar).data(), lidar.data());
        assert_eq!(tape.value(out.intact.image).data(), image.data());
    }

    #[test]
    fn masked_pass_gradients_reach_shared_parameters() {
        let (mut store, model) = small_model(16);
        let mut r = rng(17);
        let lidar = randn(&mut r, 6, 8, 1.0);
        let image = randn(&mut r, 6, 8, 1.0);
        let img_sur = randn(&mut r, 6, 8, 1.0);
        let lid_sur = randn(&mut r, 6, 8, 1.0);
        let mut tape = Tape::new();
        let out = tri_pass_with_surrogates(
            &mut tape, &store, &model, &lidar, &image, &img_sur, &lid_sur,
        )
        .unwrap();
        // loss touching only the masked predictions
        let im = out.image_masked.as_ref().unwrap().prediction;
        let lm = out.lidar_masked.as_ref().unwrap().prediction;
        let d = tape.sub(im, lm).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad_norm_sq() > 0.0, "masked passes must train shared parameters");
    }
}
