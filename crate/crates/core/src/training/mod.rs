//! AdaMax optimization of either model over shuffled minibatches, with
//! global-norm gradient clipping and deterministic checkpointing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::path::PathBuf;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::eval::bits_per_dim;
use crate::models::{ElboTerms, Model};
use crate::numerics::{DenseArray, RngStream};
use crate::params::HasParams;

/// Per-parameter first moment and infinity-norm accumulator, aligned with
/// the model's canonical parameter order.
#[derive(Clone, Debug)]
pub struct AdaMaxState {
    pub m: Vec<DenseArray>,
    pub u_inf: Vec<DenseArray>,
    pub t: u64,
}

impl AdaMaxState {
    pub fn new(model: &impl HasParams) -> Self {
        let mut m = Vec::new();
        model.for_each_param("", &mut |_, arr| m.push(DenseArray::zeros(arr.shape())));
        Self {
            u_inf: m.clone(),
            m,
            t: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Linear KL scale 0 -> 1 over this many optimizer steps; 0 disables.
    pub kl_warmup_steps: usize,
    /// Where to write checkpoints; `None` disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (and always after the
    /// final epoch).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            clip_norm: 100.0,
            kl_warmup_steps: 0,
            checkpoint_dir: None,
            checkpoint_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in [0, 1), got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("clip norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean per-example ELBO decomposition of one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub terms: ElboTerms,
    pub elbo_loss: f64,
    pub bits_per_dim: f64,
}

/// One AdaMax update: `m <- b1 m + (1 - b1) g`, `u <- max(b2 u, |g|)`,
/// `theta <- theta - lr / (1 - b1^t) * m / (u + 1e-8)`.
///
/// The step aborts (parameters and state untouched) on shape mismatch or a
/// non-finite gradient.
pub fn adamax_step(
    model: &mut impl HasParams,
    grads: &[DenseArray],
    state: &mut AdaMaxState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut shapes = Vec::new();
    model.for_each_param("", &mut |name, arr| {
        shapes.push((name.to_string(), arr.shape().to_vec()));
    });
    if shapes.len() != grads.len() || grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors, {} gradients, {} state slots",
            shapes.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, shape), g) in shapes.iter().zip(grads) {
        if g.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name}: {:?} vs parameter {:?}",
                g.shape(),
                shape
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient for {name}")));
        }
    }

    state.t += 1;
    let bias = 1.0 - cfg.beta1.powi(state.t as i32);
    let step = cfg.learning_rate / bias;
    let mut idx = 0;
    model.for_each_param_mut("", &mut |_, param| {
        let m = &mut state.m[idx];
        let u = &mut state.u_inf[idx];
        let g = &grads[idx];
        for i in 0..param.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let ui = (cfg.beta2 * u.data()[i]).max(gi.abs());
            m.data_mut()[i] = mi;
            u.data_mut()[i] = ui;
            param.data_mut()[i] -= step * mi / (ui + 1e-8);
        }
        idx += 1;
    });
    Ok(())
}

/// Scale all gradients so their joint Euclidean norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [DenseArray], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

/// Fisher-Yates shuffle driven by the stream; a pure function of the
/// stream's seed.
fn shuffled_indices(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.uniform_below(i + 1);
        order.swap(i, j);
    }
    order
}

/// Minibatch training loop. Deterministic given `(cfg, dataset)`: shuffle
/// order is a pure function of the seed and epoch index, per-example noise
/// of `(seed, epoch, step, slot)`. Aborts on a non-finite loss or gradient;
/// checkpoints already on disk are left in place.
pub fn train(model: &mut Model, dataset: &ImageDataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let (h, w, c) = dataset.extents();
    let model_cfg = model.config().clone();
    if (h, w, c) != (model_cfg.height, model_cfg.width, model_cfg.channels) {
        return Err(Error::ShapeMismatch(format!(
            "dataset images {h}x{w}x{c} vs model {}x{}x{}",
            model_cfg.height, model_cfg.width, model_cfg.channels
        )));
    }

    let root = RngStream::new(cfg.seed);
    let mut state = AdaMaxState::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(
            dataset.len(),
            &mut root.child(&format!("shuffle.{epoch}")),
        );
        let mut epoch_terms = ElboTerms::default();
        for batch in order.chunks(cfg.batch_size) {
            let kl_scale = if cfg.kl_warmup_steps > 0 {
                ((step + 1) as f64 / cfg.kl_warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let mut grad_acc: Option<Vec<DenseArray>> = None;
            for (slot, &idx) in batch.iter().enumerate() {
                let mut noise_rng = root.child(&format!("noise.{epoch}.{step}.{slot}"));
                let noise = model.draw_noise(&mut noise_rng);
                let (terms, grads) =
                    model.elbo_grads_with_noise(&dataset.images[idx], &noise, kl_scale)?;
                epoch_terms.accumulate(&terms);
                match &mut grad_acc {
                    None => grad_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.axpy(1.0, g);
                        }
                    }
                }
            }
            let mut grads = grad_acc.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale_in_place(inv);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adamax_step(model, &grads, &mut state, cfg)?;
            step += 1;
        }
        let mean = epoch_terms.scaled(1.0 / dataset.len() as f64);
        mean.check_finite()?;
        let stats = EpochStats {
            epoch,
            terms: mean,
            elbo_loss: mean.elbo_loss(),
            bits_per_dim: bits_per_dim(mean.elbo_loss(), h, w, c),
        };
        history.push(stats);

        if let Some(dir) = &cfg.checkpoint_dir {
            let due = cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0;
            if due || epoch + 1 == cfg.epochs {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("checkpoint_epoch{:04}.srvae", epoch + 1));
                save_checkpoint(
                    model,
                    &state,
                    &path,
                    &[("epoch".to_string(), (epoch + 1).to_string())],
                )?;
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_srvae, build_vae, ModelConfig};

    fn tiny_dataset(n: usize) -> ImageDataset {
        crate::data::gen_toy_shapes(n, 8, 5)
            .map(|mut ds| {
                // Collapse RGB to one channel for the tiny single-channel config.
                let images = ds
                    .images
                    .drain(..)
                    .map(|img| {
                        let values: Vec<u8> = (0..64)
                            .map(|i| img.values()[i * 3])
                            .collect();
                        crate::downscale::DiscreteImage::new(8, 8, 1, values).unwrap()
                    })
                    .collect();
                ImageDataset::new(images, None, "tiny".into()).unwrap()
            })
            .unwrap()
    }

    #[test]
    fn adamax_zero_gradient_is_identity() {
        let mut model = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        let before = crate::params::flatten_params(&model);
        let mut state = AdaMaxState::new(&model);
        let grads: Vec<DenseArray> = crate::params::clone_param_tensors(&model)
            .iter()
            .map(|t| DenseArray::zeros(t.shape()))
            .collect();
        adamax_step(&mut model, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(before.data(), crate::params::flatten_params(&model).data());
    }

    #[test]
    fn adamax_first_step_moves_by_lr_sign() {
        let mut model = Model::Vae(build_vae(&ModelConfig::tiny()).unwrap());
        let before = crate::params::flatten_params(&model);
        let mut state = AdaMaxState::new(&model);
        let mut rng = RngStream::new(3);
        let grads: Vec<DenseArray> = crate::params::clone_param_tensors(&model)
            .iter()
            .map(|t| rng.normal_array(t.shape()))
            .collect();
        let cfg = TrainConfig::default();
        adamax_step(&mut model, &grads, &mut state, &cfg).unwrap();
        let after = crate::params::flatten_params(&model);
        let mut gi = 0;
        for g in &grads {
            for &gv in g.data() {
                let delta = after.data()[gi] - before.data()[gi];
                let expected = -cfg.learning_rate * gv.signum() * gv.abs() / (gv.abs() + 1e-8);
                assert!(
                    (delta - expected).abs() < 1e-12,
                    "coord {gi}: delta {delta} vs {expected}"
                );
                gi += 1;
            }
        }
    }

    #[test]
    fn adamax_constant_gradient_keeps_unit_steps() {
        // With g constant, m_t = (1 - b1^t) g and u = |g|, so each update is
        // exactly lr * sign(g) up to the epsilon guard.
        let mut model = Model::Vae(build_vae(&ModelConfig::tiny()).unwrap());
        let mut state = AdaMaxState::new(&model);
        let mut rng = RngStream::new(4);
        let grads: Vec<DenseArray> = crate::params::clone_param_tensors(&model)
            .iter()
            .map(|t| rng.normal_array(t.shape()).map(|v| v + 0.25 * v.signum()))
            .collect();
        let cfg = TrainConfig::default();
        for t in 0..5 {
            let before = crate::params::flatten_params(&model);
            adamax_step(&mut model, &grads, &mut state, &cfg).unwrap();
            let after = crate::params::flatten_params(&model);
            let mut gi = 0;
            for g in &grads {
                for &gv in g.data() {
                    let delta = after.data()[gi] - before.data()[gi];
                    let expected = -cfg.learning_rate * gv / (gv.abs() + 1e-8);
                    assert!(
                        (delta - expected).abs() < 1e-10,
                        "step {t} coord {gi}: {delta} vs {expected}"
                    );
                    gi += 1;
                }
            }
        }
    }

    #[test]
    fn adamax_first_step_invariant_to_gradient_scale() {
        let cfg = TrainConfig::default();
        for scale in [1.0, 7.5, 1000.0] {
            let mut model = Model::Vae(build_vae(&ModelConfig::tiny()).unwrap());
            let mut state = AdaMaxState::new(&model);
            let mut rng = RngStream::new(5);
            let grads: Vec<DenseArray> = crate::params::clone_param_tensors(&model)
                .iter()
                .map(|t| rng.normal_array(t.shape()).map(|v| v * scale))
                .collect();
            let before = crate::params::flatten_params(&model);
            adamax_step(&mut model, &grads, &mut state, &cfg).unwrap();
            let after = crate::params::flatten_params(&model);
            let mut gi = 0;
            for g in &grads {
                for &gv in g.data() {
                    let delta = after.data()[gi] - before.data()[gi];
                    let expected = -cfg.learning_rate * gv / (gv.abs() + 1e-8);
                    assert!((delta - expected).abs() < 1e-9, "scale {scale} coord {gi}");
                    gi += 1;
                }
            }
        }
    }

    #[test]
    fn adamax_rejects_non_finite_gradients() {
        let mut model = Model::Vae(build_vae(&ModelConfig::tiny()).unwrap());
        let before = crate::params::flatten_params(&model);
        let mut state = AdaMaxState::new(&model);
        let mut grads: Vec<DenseArray> = crate::params::clone_param_tensors(&model)
            .iter()
            .map(|t| DenseArray::zeros(t.shape()))
            .collect();
        grads[0].data_mut()[0] = f64::NAN;
        assert!(adamax_step(&mut model, &grads, &mut state, &TrainConfig::default()).is_err());
        assert_eq!(state.t, 0, "state untouched after abort");
        assert_eq!(before.data(), crate::params::flatten_params(&model).data());
    }

    #[test]
    fn adamax_zero_learning_rate_is_identity() {
        let mut model = Model::Vae(build_vae(&ModelConfig::tiny()).unwrap());
        let before = crate::params::flatten_params(&model);
        let mut state = AdaMaxState::new(&model);
        let mut rng = RngStream::new(6);
        let grads: Vec<DenseArray> = crate::params::clone_param_tensors(&model)
            .iter()
            .map(|t| rng.normal_array(t.shape()))
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        adamax_step(&mut model, &grads, &mut state, &cfg).unwrap();
        assert_eq!(before.data(), crate::params::flatten_params(&model).data());
        assert_eq!(state.t, 1, "state still advances");
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = vec![DenseArray::from_vec(vec![3.0, 4.0])];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0].norm() - 1.0).abs() < 1e-12);
        let mut small = vec![DenseArray::from_vec(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3]);
    }

    #[test]
    fn training_is_deterministic_and_history_sized() {
        let dataset = tiny_dataset(12);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut m1 = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        let h1 = train(&mut m1, &dataset, &cfg).unwrap();
        let mut m2 = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        let h2 = train(&mut m2, &dataset, &cfg).unwrap();
        assert_eq!(h1.len(), 2);
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.terms, b.terms);
            assert_eq!(a.elbo_loss, b.elbo_loss);
        }
        assert_eq!(
            crate::params::flatten_params(&m1).data(),
            crate::params::flatten_params(&m2).data()
        );
    }

    #[test]
    fn short_training_reduces_loss() {
        let dataset = tiny_dataset(16);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 8,
            seed: 13,
            ..TrainConfig::default()
        };
        let mut model = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        let history = train(&mut model, &dataset, &cfg).unwrap();
        let first = history.first().unwrap().elbo_loss;
        let last = history.last().unwrap().elbo_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
