//! β-VAE over flattened frames.
//!
//! The encoder emits `(μ, log σ²)` for each of `n` latents; the decoder maps a
//! reparameterized sample back to per-pixel Bernoulli logits. Training
//! minimizes the β-weighted negative ELBO
//! `BCE(x, x') + β · Σᵢ KL(q(zᵢ|x) ‖ N(0, 1))`.

use std::path::Path;

use log::info;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::{adam_step, sigmoid, Activation, AdamState, Gradients, Network};
use crate::rng;
use crate::scenegen::Frame;

pub const LOG_VAR_LIMIT: f64 = 10.0;
/// Subtracted from every pixel before it reaches the encoder.
pub const INPUT_CENTRE: f64 = 0.5;

const MODEL_MAGIC: &[u8; 4] = b"BVMD";
const MODEL_VERSION: u32 = 1;

// stream coordinates
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BetaVaeConfig {
    /// Number of latent variables.
    pub n: usize,
    pub beta: f64,
    pub epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Fraction of `epochs` trained at `lr_phase1`.
    pub phase1_fraction: f64,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best loss; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
}

impl Default for BetaVaeConfig {
    fn default() -> Self {
        Self {
            n: 30,
            beta: 1.4,
            epochs: 30,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            phase1_fraction: 0.75,
            batch_size: 32,
            early_stop_patience: 5,
            seed: 0,
            hidden: vec![512, 128],
        }
    }
}

impl BetaVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n == 0 {
            return bad("latent count n must be at least 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.phase1_fraction > 0.0 && self.phase1_fraction <= 1.0) {
            return bad(format!(
                "phase1_fraction must lie in (0, 1], got {}",
                self.phase1_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_phase1 >= 0.0 && self.lr_phase2 >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Number of epochs run at `lr_phase1`; the rate switches on the next one.
    pub fn phase1_epochs(&self) -> usize {
        ((self.phase1_fraction * self.epochs as f64).round() as usize).clamp(1, self.epochs)
    }

    /// Learning rate for a 1-based epoch number.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.phase1_epochs() {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// Posterior parameters of every latent for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    /// log σ², clamped to `[-LOG_VAR_LIMIT, LOG_VAR_LIMIT]`.
    pub log_var: Vec<f64>,
}

impl LatentStats {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                actual: log_var.len(),
            });
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT))
            .collect();
        Ok(Self { mu, log_var })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Closed-form KL(N(μ, σ²) ‖ N(0, 1)) for one latent.
#[inline]
pub fn kl_normal(mu: f64, log_var: f64) -> f64 {
    0.5 * (mu * mu + log_var.exp() - log_var - 1.0)
}

/// Per-latent KL divergence to the standard normal.
pub fn kl_per_latent(stats: &LatentStats) -> Vec<f64> {
    stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .map(|(&m, &lv)| kl_normal(m, lv))
        .collect()
}

/// `z = μ + exp(log σ² / 2) · noise`
pub fn reparameterize(stats: &LatentStats, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != stats.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.len(),
            actual: noise.len(),
        });
    }
    Ok(stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Negative ELBO with Bernoulli reconstruction likelihood.
pub fn elbo_loss(x: &[f64], x_recon: &[f64], stats: &LatentStats, beta: f64) -> Result<ElboTerms> {
    if x.len() != x_recon.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: x_recon.len(),
        });
    }
    let recon: f64 = x
        .iter()
        .zip(x_recon)
        .map(|(&t, &p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .map(|v| if v.is_nan() { f64::NAN } else { v })
        .sum();
    let kl: f64 = kl_per_latent(stats).iter().sum();
    let total = recon + beta * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite("elbo loss"));
    }
    Ok(ElboTerms { total, recon, kl })
}

#[inline]
fn softplus(l: f64) -> f64 {
    l.max(0.0) + (-l.abs()).exp().ln_1p()
}

/// Mean negative ELBO over a batch together with encoder and decoder
/// gradients. `noise` holds one standard-normal row per input.
pub fn loss_and_grads(
    encoder: &Network,
    decoder: &Network,
    x: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    beta: f64,
) -> Result<(f64, Gradients, Gradients)> {
    let batch = x.nrows();
    let n = decoder.input_dim();
    if noise.dim() != (batch, n) || encoder.output_dim() != 2 * n {
        return Err(Error::DimensionMismatch {
            expected: batch * n,
            actual: noise.len(),
        });
    }
    let scale = 1.0 / batch as f64;
    let enc_trace = encoder.forward_trace(encoder_input(x).view())?;
    let h = enc_trace.output();
    let mu = h.slice(s![.., ..n]);
    let lv_raw = h.slice(s![.., n..]);
    let lv = lv_raw.mapv(|v| v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT));
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sigma * &noise);

    let dec_trace = decoder.forward_trace(z.view())?;
    let logits = dec_trace.output();

    let mut recon = 0.0;
    Zip::from(logits)
        .and(&x)
        .for_each(|&l, &t| recon += softplus(l) - t * l);
    let mut kl = 0.0;
    Zip::from(&mu).and(&lv).for_each(|&m, &v| kl += kl_normal(m, v));
    let loss = (recon + beta * kl) * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("elbo loss"));
    }

    let mut d_logits = logits.clone();
    Zip::from(&mut d_logits)
        .and(&x)
        .for_each(|g, &t| *g = (sigmoid(*g) - t) * scale);
    let (dec_grads, dz) = decoder.backward(&dec_trace, d_logits.view())?;

    let d_mu = &dz + &(&mu * (beta * scale));
    let mut d_lv = Array2::zeros(lv.raw_dim());
    Zip::from(&mut d_lv)
        .and(&dz)
        .and(&noise)
        .and(&sigma)
        .and(&lv_raw)
        .for_each(|d, &g, &e, &s, &raw| {
            *d = if raw.abs() > LOG_VAR_LIMIT {
                0.0
            } else {
                0.5 * g * e * s + beta * scale * 0.5 * (s * s - 1.0)
            };
        });
    let d_h = concatenate(Axis(1), &[d_mu.view(), d_lv.view()]).expect("same row count");
    let (enc_grads, _) = encoder.backward(&enc_trace, d_h.view())?;
    Ok((loss, enc_grads, dec_grads))
}

/// Zero-centred copy of a pixel batch; raw pixels remain the reconstruction target.
pub fn encoder_input(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| v - INPUT_CENTRE)
}

/// Mean negative ELBO only (no gradients).
pub fn batch_loss(
    encoder: &Network,
    decoder: &Network,
    x: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    beta: f64,
) -> Result<f64> {
    let n = decoder.input_dim();
    let h = encoder.forward(encoder_input(x).view())?;
    let mu = h.slice(s![.., ..n]);
    let lv = h.slice(s![.., n..]).mapv(|v| v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT));
    let z = &mu + &(&lv.mapv(|v| (0.5 * v).exp()) * &noise);
    let logits = decoder.forward(z.view())?;
    let mut recon = 0.0;
    Zip::from(&logits)
        .and(&x)
        .for_each(|&l, &t| recon += softplus(l) - t * l);
    let mut kl = 0.0;
    Zip::from(&mu).and(&lv).for_each(|&m, &v| kl += kl_normal(m, v));
    Ok((recon + beta * kl) / x.nrows() as f64)
}

/// Builds freshly initialized encoder and decoder networks.
pub fn init_networks(config: &BetaVaeConfig, pixels: usize) -> Result<(Network, Network)> {
    let mut r = rng::stream(config.seed, &[INIT_STREAM]);
    let mut enc_sizes = vec![pixels];
    enc_sizes.extend(&config.hidden);
    enc_sizes.push(2 * config.n);
    let mut enc_acts = vec![Activation::Relu; config.hidden.len()];
    enc_acts.push(Activation::Identity);

    let mut dec_sizes = vec![config.n];
    dec_sizes.extend(config.hidden.iter().rev());
    dec_sizes.push(pixels);
    // final layer emits logits; the sigmoid lives in the loss and in `reconstruct`
    let dec_acts = enc_acts.clone();

    let encoder = Network::init(&enc_sizes, &enc_acts, &mut r)?;
    let decoder = Network::init(&dec_sizes, &dec_acts, &mut r)?;
    Ok((encoder, decoder))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-frame negative ELBO.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: BetaVaeConfig,
    pub width: usize,
    pub height: usize,
    pub encoder: Network,
    pub decoder: Network,
    pub history: Vec<EpochRecord>,
}

/// Anything that maps a frame to per-latent posterior parameters.
pub trait LatentEncoder {
    fn latent_dim(&self) -> usize;

    fn encode(&self, frame: &Frame) -> Result<LatentStats>;

    fn encode_batch(&self, frames: &[&Frame]) -> Result<Vec<LatentStats>> {
        frames.iter().map(|f| self.encode(f)).collect()
    }
}

fn stack(frames: &[&Frame], pixels: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((frames.len(), pixels));
    for (mut row, f) in x.rows_mut().into_iter().zip(frames) {
        if f.pixels.len() != pixels {
            return Err(Error::DimensionMismatch {
                expected: pixels,
                actual: f.pixels.len(),
            });
        }
        row.assign(&ndarray::ArrayView1::from(&f.pixels[..]));
    }
    Ok(x)
}

fn split_stats(h: ArrayView2<f64>, n: usize) -> Vec<LatentStats> {
    h.rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            LatentStats::new(row[..n].to_vec(), row[n..].to_vec()).expect("even split")
        })
        .collect()
}

/// Trains a β-VAE on `frames` by minibatch Adam.
pub fn train(config: &BetaVaeConfig, frames: &[&Frame]) -> Result<TrainedModel> {
    config.validate()?;
    let first = frames.first().ok_or(Error::EmptyInput("training set"))?;
    let (width, height) = (first.width, first.height);
    let pixels = width * height;
    let data = stack(frames, pixels)?;
    let (mut encoder, mut decoder) = init_networks(config, pixels)?;
    let mut enc_adam = AdamState::new(&encoder);
    let mut dec_adam = AdamState::new(&decoder);

    let total = frames.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let phase1 = config.phase1_epochs();

    for epoch in 1..=config.epochs {
        let lr = config.learning_rate(epoch);
        if epoch == phase1 + 1 {
            info!(
                "epoch {epoch}: learning rate {} -> {}",
                config.lr_phase1, config.lr_phase2
            );
        }
        order.shuffle(&mut rng::stream(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = data.select(Axis(0), chunk);
            let mut nr = rng::stream(config.seed, &[NOISE_STREAM, epoch as u64, b as u64]);
            let noise = Array2::from_shape_simple_fn((chunk.len(), config.n), || StandardNormal.sample(&mut nr));
            let (loss, eg, dg) =
                loss_and_grads(&encoder, &decoder, x.view(), noise.view(), config.beta).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                    other => other,
                })?;
            adam_step(&mut encoder, &eg, &mut enc_adam, lr)?;
            adam_step(&mut decoder, &dg, &mut dec_adam, lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / total as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss,
        });
        if epoch_loss < best {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
                info!("early stop at epoch {epoch}: no improvement for {stale} epochs");
                break;
            }
        }
    }

    Ok(TrainedModel {
        config: config.clone(),
        width,
        height,
        encoder,
        decoder,
        history,
    })
}

impl TrainedModel {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn stopped_early(&self) -> bool {
        self.history.len() < self.config.epochs
    }

    /// Decoder mean image for a latent sample.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zv = ArrayView2::from_shape((1, z.len()), z).map_err(|_| Error::DimensionMismatch {
            expected: self.config.n,
            actual: z.len(),
        })?;
        Ok(self.decoder.forward(zv)?.row(0).iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC).u32(MODEL_VERSION);
        w.u32(c.n as u32)
            .f64(c.beta)
            .u32(c.epochs as u32)
            .f64(c.lr_phase1)
            .f64(c.lr_phase2)
            .f64(c.phase1_fraction)
            .u32(c.batch_size as u32)
            .u32(c.early_stop_patience as u32)
            .u64(c.seed)
            .u32(c.hidden.len() as u32);
        for &h in &c.hidden {
            w.u32(h as u32);
        }
        w.u32(self.width as u32).u32(self.height as u32);
        w.u32(self.history.len() as u32);
        for r in &self.history {
            w.u32(r.epoch as u32).f64(r.lr).f64(r.loss);
        }
        self.encoder.write_to(&mut w.buf).expect("vec write");
        self.decoder.write_to(&mut w.buf).expect("vec write");
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::checked(data, "model", MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::format("model", format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let beta = r.f64()?;
        let epochs = r.u32()? as usize;
        let lr_phase1 = r.f64()?;
        let lr_phase2 = r.f64()?;
        let phase1_fraction = r.f64()?;
        let batch_size = r.u32()? as usize;
        let early_stop_patience = r.u32()? as usize;
        let seed = r.u64()?;
        let hidden_len = r.u32()? as usize;
        if hidden_len > 64 {
            return Err(Error::format("model", "implausible hidden layer count"));
        }
        let hidden = (0..hidden_len)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let history_len = r.u32()? as usize;
        let mut history = Vec::with_capacity(history_len.min(1 << 16));
        for _ in 0..history_len {
            history.push(EpochRecord {
                epoch: r.u32()? as usize,
                lr: r.f64()?,
                loss: r.f64()?,
            });
        }
        let mut rest = r.rest();
        let encoder = Network::read_from(&mut rest)?;
        let decoder = Network::read_from(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("model", "trailing bytes"));
        }
        let config = BetaVaeConfig {
            n,
            beta,
            epochs,
            lr_phase1,
            lr_phase2,
            phase1_fraction,
            batch_size,
            early_stop_patience,
            seed,
            hidden,
        };
        if encoder.output_dim() != 2 * n || decoder.input_dim() != n {
            return Err(Error::format("model", "network shapes disagree with latent count"));
        }
        if encoder.input_dim() != width * height || decoder.output_dim() != width * height {
            return Err(Error::format("model", "network shapes disagree with frame size"));
        }
        Ok(Self {
            config,
            width,
            height,
            encoder,
            decoder,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

impl LatentEncoder for TrainedModel {
    fn latent_dim(&self) -> usize {
        self.config.n
    }

    fn encode(&self, frame: &Frame) -> Result<LatentStats> {
        Ok(self.encode_batch(&[frame])?.remove(0))
    }

    fn encode_batch(&self, frames: &[&Frame]) -> Result<Vec<LatentStats>> {
        let x = stack(frames, self.pixels())?;
        let h = self.encoder.forward(encoder_input(x.view()).view())?;
        Ok(split_stats(h.view(), self.config.n))
    }
}
