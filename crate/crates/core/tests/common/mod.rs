use std::sync::OnceLock;

use dampc_core::datagen::NormStats;
use dampc_core::diffusion::{train, DenoiserDims, DiffusionModel, NoiseSchedule, TrainConfig};
use dampc_core::nn::Activation;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Diffusion model trained on an equal mixture of N(-1, 0.1^2) and
/// N(1, 0.1^2), shared by every test in the binary.
pub fn toy() -> &'static DiffusionModel {
    static TOY: OnceLock<DiffusionModel> = OnceLock::new();
    TOY.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let data = Array2::from_shape_fn((n, 1), |_| {
            let m = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            m + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        let dims = DenoiserDims {
            plan_dim: 1,
            obs_dim: 0,
            time_dim: 16,
        };
        let mut model = DiffusionModel::new(
            NoiseSchedule::cosine(5).unwrap(),
            dims,
            &[64, 64, 64],
            Activation::Gelu,
            1,
            NormStats::identity(0, 1),
        )
        .unwrap();
        let cfg = TrainConfig {
            steps: 3000,
            batch_size: 256,
            lr: 2e-3,
            lr_final: 1e-4,
            min_snr_gamma: 5.0,
            snr_floor: 1.0,
            seed: 1,
        };
        train(&mut model, &data, &Array2::zeros((n, 0)), &cfg).unwrap();
        model
    })
}
