//! Diffusion decoder: noise-prediction network over mel frames with unit
//! conditioning, timestep embeddings, and speaker fusion through
//! conditional layer normalization.

use super::{SpeakerEmbedding, SynthesisError};
use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::mat::Mat;
use crate::nn::{Gradients, Graph, LayerNormLayer, LinearLayer, NodeId, ParamStore};
use crate::rng::Prng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub n_mels: usize,
    /// Conditioning width (soft-unit dimension).
    pub unit_dim: usize,
    pub spk_dim: usize,
    pub channels: usize,
    pub residual_blocks: usize,
    /// Diffusion step count N.
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of replacing unit conditioning with the learned null
    /// token during training (classifier-free guidance).
    pub p_uncond: f64,
    /// Default guidance weight at inference.
    pub guidance_weight: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            n_mels: 80,
            unit_dim: 64,
            spk_dim: 32,
            channels: 64,
            residual_blocks: 3,
            n_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            p_uncond: 0.1,
            guidance_weight: 1.0,
        }
    }
}

/// Linear beta schedule with precomputed cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(n_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..n_steps)
            .map(|i| {
                if n_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(n_steps);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        NoiseSchedule { betas, alpha_bars }
    }

    /// Cumulative product at 1-based timestep n.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n - 1]
    }
}

struct ResidualBlock {
    cln_scale: LinearLayer,
    cln_shift: LinearLayer,
    conv1: LinearLayer,
    conv2: LinearLayer,
}

struct Arch {
    in_proj: LinearLayer,
    cond_proj: LinearLayer,
    /// Learned replacement for dropped conditioning (1 x channels).
    null_token: usize,
    t_lift: LinearLayer,
    t_drop: LinearLayer,
    blocks: Vec<ResidualBlock>,
    out_ln: LayerNormLayer,
    out_proj: LinearLayer,
}

pub struct DiffusionDecoder {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub lineage: Vec<String>,
    arch: Arch,
}

fn build_arch(config: &DiffusionConfig, store: &mut ParamStore, rng: &mut Prng) -> Arch {
    let c = config.channels;
    Arch {
        in_proj: LinearLayer::new(store, rng, "synth.in", config.n_mels, c),
        cond_proj: LinearLayer::new(store, rng, "synth.cond", config.unit_dim, c),
        null_token: store.add_glorot("synth.null_token", 1, c, rng),
        t_lift: LinearLayer::new(store, rng, "synth.t_lift", c, c),
        t_drop: LinearLayer::new(store, rng, "synth.t_drop", c, c),
        blocks: (0..config.residual_blocks)
            .map(|b| ResidualBlock {
                cln_scale: LinearLayer::new(store, rng, &format!("synth.block{b}.cln_scale"), config.spk_dim, c),
                cln_shift: LinearLayer::new(store, rng, &format!("synth.block{b}.cln_shift"), config.spk_dim, c),
                conv1: LinearLayer::new(store, rng, &format!("synth.block{b}.conv1"), 3 * c, c),
                conv2: LinearLayer::new(store, rng, &format!("synth.block{b}.conv2"), 3 * c, c),
            })
            .collect(),
        out_ln: LayerNormLayer::new(store, "synth.out_ln", c),
        out_proj: LinearLayer::new(store, rng, "synth.out", c, config.n_mels),
    }
}

/// Sinusoidal embedding of a (1-based) timestep.
fn timestep_embedding(n: usize, dim: usize) -> Mat {
    let mut row = Mat::zeros(1, dim);
    for i in 0..dim / 2 {
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        row.data[2 * i] = (n as f64 * rate).sin();
        row.data[2 * i + 1] = (n as f64 * rate).cos();
    }
    row
}

impl DiffusionDecoder {
    pub fn new(config: DiffusionConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = Prng::derive(seed, "diffusion-init", 0);
        let arch = build_arch(&config, &mut store, &mut rng);
        let schedule = NoiseSchedule::linear(config.n_steps, config.beta_start, config.beta_end);
        DiffusionDecoder {
            config,
            schedule,
            store,
            lineage: Vec::new(),
            arch,
        }
    }

    pub fn with_store(config: DiffusionConfig, store: ParamStore, lineage: Vec<String>) -> Self {
        let mut probe = ParamStore::new();
        let mut rng = Prng::seed_from_u64(0);
        let arch = build_arch(&config, &mut probe, &mut rng);
        assert_eq!(probe.len(), store.len(), "store layout mismatch");
        let schedule = NoiseSchedule::linear(config.n_steps, config.beta_start, config.beta_end);
        DiffusionDecoder {
            config,
            schedule,
            store,
            lineage,
            arch,
        }
    }

    /// Closed-form forward marginal: sqrt(abar_n) x0 + sqrt(1 - abar_n) eps.
    pub fn q_sample(&self, x0: &Mat, n: usize, eps: &Mat) -> Result<Mat, SynthesisError> {
        if n < 1 || n > self.config.n_steps {
            return Err(SynthesisError::RangeError(format!(
                "timestep {n} outside 1..={}",
                self.config.n_steps
            )));
        }
        if !x0.same_shape(eps) {
            return Err(SynthesisError::ShapeError("x0 and eps shapes differ".into()));
        }
        let abar = self.schedule.alpha_bar(n);
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        let data = x0
            .data
            .iter()
            .zip(&eps.data)
            .map(|(x, e)| a * x + b * e)
            .collect();
        Ok(Mat::from_vec(x0.rows, x0.cols, data))
    }

    fn noise_net(
        &self,
        g: &mut Graph,
        x: NodeId,
        t_rows: usize,
        n: usize,
        cond: Option<&Mat>,
        spk: &SpeakerEmbedding,
    ) -> NodeId {
        let c = self.config.channels;
        let mut h = self.arch.in_proj.apply(g, x);
        // Conditioning rows: projected units, or the learned null token
        // broadcast over time.
        let cond_rows = match cond {
            Some(units) => {
                let u = g.input(units.clone());
                self.arch.cond_proj.apply(g, u)
            }
            None => {
                let null = g.param(self.arch.null_token);
                g.concat_rows(&vec![null; t_rows])
            }
        };
        let t_raw = g.input(timestep_embedding(n, c));
        let t_hidden = self.arch.t_lift.apply(g, t_raw);
        let t_hidden = g.gelu(t_hidden);
        let t_emb = self.arch.t_drop.apply(g, t_hidden);
        let spk_row = g.input(Mat::row_vector(&spk.vector));
        for block in &self.arch.blocks {
            // Conditional layer normalization fuses the speaker embedding.
            let normed = g.layer_norm(h);
            let ones = g.input(Mat::from_vec(1, c, vec![1.0; c]));
            let scale_raw = block.cln_scale.apply(g, spk_row);
            let scale = g.add(ones, scale_raw);
            let shift = block.cln_shift.apply(g, spk_row);
            let y = g.mul_row(normed, scale);
            let y = g.add_row(y, shift);
            let unfolded = g.unfold(y, 3, 1, 1, t_rows);
            let y = block.conv1.apply(g, unfolded);
            let y = g.add(y, cond_rows);
            let y = g.add_row(y, t_emb);
            let y = g.gelu(y);
            let unfolded = g.unfold(y, 3, 1, 1, t_rows);
            let y = block.conv2.apply(g, unfolded);
            h = g.add(h, y);
        }
        let h = self.arch.out_ln.apply(g, h);
        self.arch.out_proj.apply(g, h)
    }

    /// Predicted noise for a noisy input at timestep n. `cond = None` uses
    /// the learned null token (the unconditional branch of guidance).
    pub fn predict_noise(
        &self,
        x: &Mat,
        n: usize,
        cond: Option<&Mat>,
        spk: &SpeakerEmbedding,
    ) -> Result<Mat, SynthesisError> {
        self.check_shapes(x, cond, spk)?;
        let mut g = Graph::new(&self.store);
        let xin = g.input(x.clone());
        let out = self.noise_net(&mut g, xin, x.rows, n, cond, spk);
        Ok(g.value(out).clone())
    }

    fn check_shapes(&self, x: &Mat, cond: Option<&Mat>, spk: &SpeakerEmbedding) -> Result<(), SynthesisError> {
        if x.cols != self.config.n_mels {
            return Err(SynthesisError::ShapeError(format!(
                "mel dim {} vs configured {}",
                x.cols, self.config.n_mels
            )));
        }
        if let Some(u) = cond {
            if u.rows != x.rows || u.cols != self.config.unit_dim {
                return Err(SynthesisError::ShapeError(format!(
                    "conditioning {}x{} vs mel rows {} and unit dim {}",
                    u.rows, u.cols, x.rows, self.config.unit_dim
                )));
            }
        }
        if spk.vector.len() != self.config.spk_dim {
            return Err(SynthesisError::ShapeError(format!(
                "speaker dim {} vs configured {}",
                spk.vector.len(),
                self.config.spk_dim
            )));
        }
        Ok(())
    }

    /// One denoising training step: uniform timestep, Gaussian target
    /// noise, MSE on the prediction; conditioning drops to the null token
    /// with probability `p_uncond`. Returns the loss and whether the null
    /// token was used.
    pub fn train_step(
        &self,
        mel: &Mat,
        units: &Mat,
        spk: &SpeakerEmbedding,
        rng: &mut Prng,
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, bool), SynthesisError> {
        self.check_shapes(mel, Some(units), spk)?;
        let n = 1 + rng.below(self.config.n_steps);
        let eps = Mat::from_vec(
            mel.rows,
            mel.cols,
            (0..mel.data.len()).map(|_| rng.normal()).collect(),
        );
        let x_n = self.q_sample(mel, n, &eps)?;
        let use_null = self.config.p_uncond > 0.0 && rng.uniform() < self.config.p_uncond;
        let cond = if use_null { None } else { Some(units) };
        let mut g = Graph::new(&self.store);
        let xin = g.input(x_n);
        let pred = self.noise_net(&mut g, xin, mel.rows, n, cond, spk);
        let target = g.input(eps);
        let loss = g.mse_loss(pred, target);
        let value = g.scalar_value(loss);
        if let Some(accum) = grads {
            g.backward(loss, 1.0, accum);
        }
        Ok((value, use_null))
    }

    /// Ancestral sampling from pure noise, guided at every step. Output
    /// has one mel frame per conditioning frame; fully determined by the
    /// seed.
    pub fn sample(&self, units: &Mat, spk: &SpeakerEmbedding, w: f64, seed: u64) -> Result<Mat, SynthesisError> {
        if units.rows == 0 {
            return Err(SynthesisError::ShapeError("empty conditioning".into()));
        }
        let t_rows = units.rows;
        let mut rng = Prng::derive(seed, "diffusion-sample", 0);
        let mut x = Mat::from_vec(
            t_rows,
            self.config.n_mels,
            (0..t_rows * self.config.n_mels).map(|_| rng.normal()).collect(),
        );
        for n in (1..=self.config.n_steps).rev() {
            let eps_cond = self.predict_noise(&x, n, Some(units), spk)?;
            let eps_uncond = self.predict_noise(&x, n, None, spk)?;
            let eps_hat = super::guided_noise(&eps_cond, &eps_uncond, w)?;
            let beta = self.schedule.betas[n - 1];
            let alpha = 1.0 - beta;
            let abar = self.schedule.alpha_bar(n);
            let coeff = beta / (1.0 - abar).sqrt();
            let sigma = if n > 1 {
                let abar_prev = self.schedule.alpha_bar(n - 1);
                ((1.0 - abar_prev) / (1.0 - abar) * beta).sqrt()
            } else {
                0.0
            };
            for i in 0..x.data.len() {
                let mean = (x.data[i] - coeff * eps_hat.data[i]) / alpha.sqrt();
                let z = if n > 1 { rng.normal() } else { 0.0 };
                x.data[i] = mean + sigma * z;
            }
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthesisError> {
        let meta = serde_json::json!({
            "kind": "diffusion_decoder",
            "config": self.config,
            "lineage": self.lineage,
        });
        save_checkpoint(path, &meta, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthesisError> {
        let ckpt = load_checkpoint(path)?;
        let config: DiffusionConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| SynthesisError::ConfigError(format!("bad checkpoint config: {e}")))?;
        let lineage: Vec<String> = serde_json::from_value(ckpt.meta["lineage"].clone()).unwrap_or_default();
        Ok(DiffusionDecoder::with_store(config, ckpt.params, lineage))
    }
}
