//! The multimodal ViT autoencoder, its training loop and slice-wise inference.
//!
//! Encoder: patch embedding → position embedding → pre-norm transformer
//! blocks → final norm → pooling → fusion layer into the latent. Decoder:
//! latent reshaped to a small feature map, then conv stages that upsample ×2
//! until the image size is reached (centre-cropping any overshoot), and a 1×1
//! projection back to the input modalities.

mod checkpoint;
mod config;
mod net;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Graph, ParamStore, SsimParams, Tensor, Var};
use crate::volume::{MultimodalVolume, SliceBatch};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER, CHECKPOINT_WEIGHTS};
pub use config::{Activation, ModelConfig, Pooling, PositionEmbedding, TrainConfig, MIN_DECODER_CHANNELS};
pub use net::{patchify, sinusoidal_table};

use net::Layout;

/// Parameters, optimiser moments and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Best validation loss seen so far, if any epoch has completed.
    pub best_val_loss: Option<f64>,
    /// Number of completed epochs.
    pub epoch: usize,
    layout: Layout,
}

/// Deterministically initialise a model.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    let (params, layout) = net::init_params(config, seed)?;
    let adam = AdamState::new(TrainConfig::default().adam(), &params);
    Ok(ModelState {
        config: config.clone(),
        params,
        adam,
        best_val_loss: None,
        epoch: 0,
        layout,
    })
}

/// The reconstruction objective split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub ssim: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(mse: f64, ssim: f64, alpha: f64) -> Self {
        Self {
            mse,
            ssim,
            total: mse + alpha * (1.0 - ssim),
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub saved: bool,
}

struct Pass {
    graph: Graph<f32>,
    params: Vec<Var>,
    output: Var,
}

impl ModelState {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn run(&self, batch: &SliceBatch, input: Vec<f32>) -> Result<Pass> {
        net::check_batch(&self.config, batch)?;
        let mut graph = Graph::new();
        let params = self.params.bind(&mut graph);
        let input = SliceBatch {
            data: input,
            ..batch.clone()
        };
        let patches = net::patchify(&input, self.config.patch_size);
        let rows = batch.len() * self.config.tokens();
        let patches = graph.constant(Tensor::new(&[rows, self.config.patch_dim()], patches)?);
        let output = net::forward_graph(&mut graph, &self.config, &self.layout, &params, patches, batch.len())?;
        Ok(Pass { graph, params, output })
    }

    /// Noise-free reconstruction of every slice in `batch`.
    pub fn forward(&self, batch: &SliceBatch) -> Result<SliceBatch> {
        if batch.is_empty() {
            return Ok(batch.clone());
        }
        let pass = self.run(batch, batch.data.clone())?;
        Ok(SliceBatch {
            data: pass.graph.value(pass.output).data().to_vec(),
            ..batch.clone()
        })
    }

    fn objective(pass: &mut Pass, batch: &SliceBatch, cfg: &TrainConfig) -> Result<(Var, LossTerms)> {
        let g = &mut pass.graph;
        let shape = [batch.len(), batch.channels, batch.height, batch.width];
        let target = g.constant(Tensor::new(&shape, batch.data.clone())?);
        let mse = g.mse_loss(pass.output, target)?;
        let offset = cfg.ssim_offset as f32;
        let shifted_out = g.add_scalar(pass.output, offset);
        let shifted_target = g.add_scalar(target, offset);
        let ssim = g.ssim(
            shifted_out,
            shifted_target,
            SsimParams::with_data_range(cfg.ssim_data_range),
        )?;
        let dissim = g.scale(ssim, -1.0);
        let dissim = g.add_scalar(dissim, 1.0);
        let weighted = g.scale(dissim, cfg.alpha as f32);
        let total = g.add(mse, weighted)?;
        let terms = LossTerms::new(g.value(mse).item() as f64, g.value(ssim).item() as f64, cfg.alpha);
        Ok((total, terms))
    }

    /// Loss of the noise-free reconstruction of `batch`, averaged per slice over
    /// mini-batches of `cfg.batch_size`.
    pub fn evaluate(&self, batch: &SliceBatch, cfg: &TrainConfig) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::Empty("evaluation batch".into()));
        }
        let (mut mse, mut ssim) = (0.0, 0.0);
        let indices: Vec<usize> = (0..batch.len()).collect();
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let sub = batch.select(chunk);
            let mut pass = self.run(&sub, sub.data.clone())?;
            let (_, terms) = Self::objective(&mut pass, &sub, cfg)?;
            mse += terms.mse * chunk.len() as f64;
            ssim += terms.ssim * chunk.len() as f64;
        }
        let n = batch.len() as f64;
        Ok(LossTerms::new(mse / n, ssim / n, cfg.alpha))
    }

    /// One optimiser step on `batch`, with Gaussian noise of `cfg.noise_std`
    /// added to the input only.
    pub fn train_step<R: Rng>(&mut self, batch: &SliceBatch, cfg: &TrainConfig, rng: &mut R) -> Result<LossTerms> {
        let noisy: Vec<f32> = batch
            .data
            .iter()
            .map(|&v| {
                let n: f64 = rng.sample(StandardNormal);
                v + (n * cfg.noise_std) as f32
            })
            .collect();
        let mut pass = self.run(batch, noisy)?;
        let (loss, terms) = Self::objective(&mut pass, batch, cfg)?;
        if !terms.total.is_finite() {
            return Err(Error::Data(format!("non-finite training loss {}", terms.total)));
        }
        let mut grads = pass.graph.backward(loss)?;
        let grads: Vec<Tensor<f32>> = pass
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        self.adam.update(&mut self.params, &grads);
        Ok(terms)
    }
}

/// Train for `cfg.epochs` further epochs.
///
/// After each epoch the noise-free validation loss is computed; when it improves
/// on the best so far the state is checkpointed to `checkpoint_dir` (if given).
/// There is no schedule and no early stopping.
pub fn train(
    state: &mut ModelState,
    train_set: &SliceBatch,
    val_set: &SliceBatch,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set has no slices".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set has no slices".into()));
    }
    state.adam.config = cfg.adam();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.select(chunk);
            let terms = state.train_step(&batch, cfg, &mut rng)?;
            total += terms.total * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = state.evaluate(val_set, cfg)?.total;
        state.epoch = epoch;
        let saved = state.best_val_loss.is_none_or(|best| val_loss < best);
        if saved {
            state.best_val_loss = Some(val_loss);
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(state, dir)?;
            }
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6}{}",
            if saved { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            saved,
        });
    }
    Ok(history)
}

/// Render a loss history as `epoch,train_loss,val_loss,saved` CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,saved\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.saved));
    }
    out
}

/// Slice-wise, noise-free reconstruction of a normalised volume.
pub fn reconstruct_volume(state: &ModelState, vol: &MultimodalVolume, batch_size: usize) -> Result<MultimodalVolume> {
    let dims = vol.dims();
    let cfg = &state.config;
    if dims.h != cfg.image_size || dims.w != cfg.image_size || vol.modalities().len() != cfg.n_modalities {
        return Err(Error::shape(
            "reconstruct_volume",
            &[vol.modalities().len(), dims.h, dims.w],
            &[cfg.n_modalities, cfg.image_size, cfg.image_size],
        ));
    }
    let plane = dims.plane();
    let mut out = vec![0.0f32; vol.data().len()];
    let slices: Vec<usize> = (0..dims.d).collect();
    for chunk in slices.chunks(batch_size.max(1)) {
        let mut batch = SliceBatch::empty(cfg.n_modalities, dims.h, dims.w);
        for &z in chunk {
            batch.push(z, &vol.stacked_slice(z));
        }
        let recon = state.forward(&batch)?;
        for (i, &z) in chunk.iter().enumerate() {
            let slice = recon.get(i);
            for m in 0..cfg.n_modalities {
                let dst = (m * dims.d + z) * plane;
                out[dst..dst + plane].copy_from_slice(&slice[m * plane..(m + 1) * plane]);
            }
        }
    }
    vol.with_data(out)
}

/// Per-slice mean squared error between two `[N, C, H, W]` batches.
pub fn slice_mse(a: &SliceBatch, b: &SliceBatch) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.slice_len() != b.slice_len() {
        return Err(Error::shape(
            "slice_mse",
            &[a.len(), a.slice_len()],
            &[b.len(), b.slice_len()],
        ));
    }
    Ok((0..a.len())
        .map(|i| {
            let (x, y) = (a.get(i), b.get(i));
            x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / x.len() as f64
        })
        .collect())
}
