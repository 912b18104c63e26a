//! Convolutional VAE mapping observations to a 64-dimensional latent.
//!
//! Encoder: three stride-2 convolutions (k4, p1) with ReLU, flatten, dense to
//! `μ ⊕ log σ²`. Decoder mirrors it: dense, three transposed convolutions,
//! sigmoid output so reconstructions live in [0, 1].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{self, Observation};
use crate::error::{Error, Result};
use crate::nn::{
    checkpoint, Activation, Adam, AdamConfig, Conv2d, ConvGeometry, ConvTranspose2d, Dense, EarlyStopping, Layer,
    ParamSet, Sequential, Tape,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 64;

const GEOMETRY: ConvGeometry = ConvGeometry {
    kernel: 4,
    stride: 2,
    padding: 1,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub conv_channels: [usize; 3],
    /// Weight on the summed KL term relative to the per-pixel mean
    /// reconstruction error. `None` means `1 / (height·width·channels)`, which
    /// is β = 1 on the summed-pixel likelihood scale.
    pub kl_weight: Option<f64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            height: env::HEIGHT,
            width: env::WIDTH,
            channels: env::CHANNELS,
            latent_dim: LATENT_DIM,
            conv_channels: [32, 64, 128],
            kl_weight: None,
        }
    }
}

impl VaeConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn kl_weight(&self) -> f64 {
        self.kl_weight.unwrap_or(1.0 / self.pixels() as f64)
    }

    fn bottleneck(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "VAE image size {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        if self.latent_dim == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("VAE latent and channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Loss terms averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VaeLoss {
    pub total: f64,
    /// Mean squared error per pixel channel.
    pub recon: f64,
    /// `0.5·Σ(exp(lv) + μ² − 1 − lv)` per sample.
    pub kl: f64,
}

/// Closed-form KL divergence from `N(μ, diag(exp(lv)))` to `N(0, I)`.
pub fn kl_divergence<T: Scalar>(mu: &[T], logvar: &[T]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (lv.exp() + m * m - 1.0 - lv)
        })
        .sum()
}

/// Mean squared difference between two equally sized images.
pub fn pixel_mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let se: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
    se / a.len().max(1) as f64
}

/// Reparameterized draw `z = μ + exp(lv/2)·ε`.
pub fn sample_z<T: Scalar, R: rand::Rng + ?Sized>(mu: &[T], logvar: &[T], rng: &mut R) -> Vec<T> {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let e: f64 = StandardNormal.sample(rng);
            m + (lv * T::lit(0.5)).exp() * T::lit(e)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Vae<T> {
    pub config: VaeConfig,
    pub params: ParamSet<T>,
    encoder: Sequential,
    decoder: Sequential,
}

/// Recorded forward pass for [`Vae::loss_and_grad`].
struct VaePass<T> {
    enc_tape: Tape<T>,
    dec_tape: Tape<T>,
    stats: Tensor<T>,
    recon: Tensor<T>,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [c1, c2, c3] = config.conv_channels;
        let (bh, bw) = config.bottleneck();
        let flat = bh * bw * c3;
        let relu = || Layer::Activation(Activation::Relu);
        let encoder = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(&mut params, "enc.conv1", config.channels, c1, GEOMETRY, &mut rng)),
            relu(),
            Layer::Conv2d(Conv2d::new(&mut params, "enc.conv2", c1, c2, GEOMETRY, &mut rng)),
            relu(),
            Layer::Conv2d(Conv2d::new(&mut params, "enc.conv3", c2, c3, GEOMETRY, &mut rng)),
            relu(),
            Layer::Reshape(vec![flat]),
            Layer::Dense(Dense::new(&mut params, "enc.stats", flat, 2 * config.latent_dim, &mut rng)),
        ]);
        let decoder = Sequential::new(vec![
            Layer::Dense(Dense::new(&mut params, "dec.dense", config.latent_dim, flat, &mut rng)),
            relu(),
            Layer::Reshape(vec![bh, bw, c3]),
            Layer::ConvTranspose2d(ConvTranspose2d::new(&mut params, "dec.deconv1", c3, c2, GEOMETRY, &mut rng)),
            relu(),
            Layer::ConvTranspose2d(ConvTranspose2d::new(&mut params, "dec.deconv2", c2, c1, GEOMETRY, &mut rng)),
            relu(),
            Layer::ConvTranspose2d(ConvTranspose2d::new(
                &mut params,
                "dec.deconv3",
                c1,
                config.channels,
                GEOMETRY,
                &mut rng,
            )),
            Layer::Activation(Activation::Sigmoid),
        ]);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.config.height, self.config.width, self.config.channels]
    }

    /// Stacks observations into a `[n, H, W, C]` tensor scaled to [0, 1].
    pub fn batch_from_observations(&self, frames: &[&Observation]) -> Result<Tensor<T>> {
        if self.config.pixels() != Observation::LEN {
            return Err(Error::shape(
                "vae.observation",
                &self.image_shape(1)[1..],
                &[env::HEIGHT, env::WIDTH, env::CHANNELS],
            ));
        }
        let mut x = Tensor::zeros(&self.image_shape(frames.len()));
        for (obs, row) in frames.iter().zip(x.data_mut().chunks_exact_mut(Observation::LEN)) {
            obs.write_unit(row);
        }
        Ok(x)
    }

    /// Encoder statistics for a batch: `(μ, log σ²)`, each `[n, latent]`.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let stats = self.encoder.forward(&self.params, x, None)?;
        Ok(self.split_stats(&stats))
    }

    fn split_stats(&self, stats: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (n, l) = (stats.rows(), self.latent_dim());
        let mut mu = Tensor::zeros(&[n, l]);
        let mut lv = Tensor::zeros(&[n, l]);
        for i in 0..n {
            let row = stats.row(i);
            mu.row_mut(i).copy_from_slice(&row[..l]);
            lv.row_mut(i).copy_from_slice(&row[l..]);
        }
        (mu, lv)
    }

    pub fn encode(&self, obs: &Observation) -> Result<(Vec<T>, Vec<T>)> {
        let (mu, lv) = self.encode_batch(&self.batch_from_observations(&[obs])?)?;
        Ok((mu.into_data(), lv.into_data()))
    }

    /// Mean latent for every frame, `[n, latent]`, computed in chunks.
    pub fn encode_means<'a, I>(&self, frames: I) -> Result<Tensor<T>>
    where
        I: IntoIterator<Item = &'a Observation>,
    {
        let frames: Vec<&Observation> = frames.into_iter().collect();
        let l = self.latent_dim();
        let mut out = Tensor::zeros(&[frames.len(), l]);
        for (chunk_index, chunk) in frames.chunks(64).enumerate() {
            let (mu, _) = self.encode_batch(&self.batch_from_observations(chunk)?)?;
            let start = chunk_index * 64 * l;
            out.data_mut()[start..start + mu.len()].copy_from_slice(mu.data());
        }
        Ok(out)
    }

    /// Decodes `[n, latent]` to `[n, H, W, C]` images in [0, 1].
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.latent_dim() {
            return Err(Error::shape("vae.decode", &[z.rows(), self.latent_dim()], z.shape()));
        }
        self.decoder.forward(&self.params, z, None)
    }

    fn forward_pass(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<VaePass<T>> {
        if x.shape() != self.image_shape(x.rows()) {
            return Err(Error::shape("vae.loss", &self.image_shape(x.rows()), x.shape()));
        }
        let n = x.rows();
        let l = self.latent_dim();
        if eps.shape() != [n, l] {
            return Err(Error::shape("vae.noise", &[n, l], eps.shape()));
        }
        let mut enc_tape = Tape::new();
        let stats = self.encoder.forward(&self.params, x, Some(&mut enc_tape))?;
        let mut z = Tensor::zeros(&[n, l]);
        for i in 0..n {
            let (s, e) = (stats.row(i), eps.row(i));
            for (j, zj) in z.row_mut(i).iter_mut().enumerate() {
                *zj = s[j] + (s[l + j] * T::lit(0.5)).exp() * e[j];
            }
        }
        let mut dec_tape = Tape::new();
        let recon = self.decoder.forward(&self.params, &z, Some(&mut dec_tape))?;
        Ok(VaePass {
            enc_tape,
            dec_tape,
            stats,
            recon,
        })
    }

    fn loss_of(&self, x: &Tensor<T>, pass: &VaePass<T>) -> VaeLoss {
        let n = x.rows();
        let l = self.latent_dim();
        let recon = pixel_mse(pass.recon.data(), x.data());
        let kl = (0..n)
            .map(|i| {
                let row = pass.stats.row(i);
                kl_divergence(&row[..l], &row[l..])
            })
            .sum::<f64>()
            / n as f64;
        VaeLoss {
            total: recon + self.config.kl_weight() * kl,
            recon,
            kl,
        }
    }

    /// Loss for a batch with explicit reparameterization noise `eps` (`[n, latent]`).
    pub fn loss(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<VaeLoss> {
        let pass = self.forward_pass(x, eps)?;
        Ok(self.loss_of(x, &pass))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(VaeLoss, ParamSet<T>)> {
        let pass = self.forward_pass(x, eps)?;
        let loss = self.loss_of(x, &pass);
        let n = x.rows();
        let l = self.latent_dim();
        let mut grads = self.params.zeros_like();
        let scale = T::lit(2.0 / x.len() as f64);
        let mut d_recon = pass.recon.clone();
        for (g, &t) in d_recon.data_mut().iter_mut().zip(x.data()) {
            *g = (*g - t) * scale;
        }
        let dz = self.decoder.backward(&self.params, &pass.dec_tape, &d_recon, &mut grads)?;
        let w = T::lit(self.config.kl_weight() / n as f64);
        let half = T::lit(0.5);
        let mut d_stats = Tensor::zeros(pass.stats.shape());
        for i in 0..n {
            let (s, e, g) = (pass.stats.row(i), eps.row(i), dz.row(i));
            let out = d_stats.row_mut(i);
            for j in 0..l {
                let (mu, lv) = (s[j], s[l + j]);
                let std = (lv * half).exp();
                out[j] = g[j] + w * mu;
                out[l + j] = g[j] * e[j] * std * half + w * half * (lv.exp() - T::one());
            }
        }
        self.encoder.backward(&self.params, &pass.enc_tape, &d_stats, &mut grads)?;
        Ok((loss, grads))
    }

    /// Loss plus the ReLU sign pattern of the pass; used by gradient checks.
    pub fn loss_with_kinks(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(VaeLoss, Vec<bool>)> {
        let pass = self.forward_pass(x, eps)?;
        let mut k = pass.enc_tape.kink_pattern(&self.encoder.layers);
        k.extend(pass.dec_tape.kink_pattern(&self.decoder.layers));
        Ok((self.loss_of(x, &pass), k))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load::<T>(path)?;
        let config: VaeConfig = serde_json::from_str(&meta).map_err(|e| Error::Format {
            path: path.into(),
            reason: format!("VAE metadata: {e}"),
        })?;
        let mut vae = Self::new(config, 0)?;
        vae.params.load_from(&params)?;
        Ok(vae)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            max_epochs: 500,
            patience: 30,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub recon: f64,
    pub kl: f64,
}

pub fn log_csv(log: &[VaeEpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss,recon,kl\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8}\n",
            r.epoch, r.train_loss, r.test_loss, r.recon, r.kl
        ));
    }
    s
}

/// Standard normal noise `[n, l]`.
pub fn noise<T: Scalar>(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..n * l)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(e)
        })
        .collect();
    Tensor::from_vec(&[n, l], data).expect("length matches")
}

/// Mean test loss with noise drawn from a fixed seed so epochs are comparable.
pub fn evaluate<T: Scalar>(vae: &Vae<T>, frames: &[&Observation], batch_size: usize, seed: u64) -> Result<VaeLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    let mut acc = VaeLoss::default();
    for chunk in frames.chunks(batch_size.max(1)) {
        let x = vae.batch_from_observations(chunk)?;
        let eps = noise(chunk.len(), vae.latent_dim(), &mut rng);
        let l = vae.loss(&x, &eps)?;
        let w = chunk.len() as f64 / frames.len() as f64;
        acc.total += l.total * w;
        acc.recon += l.recon * w;
        acc.kl += l.kl * w;
    }
    Ok(acc)
}

/// Minibatch Adam training with early stopping on total test loss. Returns the
/// best-test-loss parameters and the per-epoch log.
pub fn train_vae<T: Scalar>(
    mut vae: Vae<T>,
    train: &[&Observation],
    test: &[&Observation],
    config: &VaeTrainConfig,
) -> Result<(Vae<T>, Vec<VaeEpochLog>)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("VAE training needs nonempty train and test frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &vae.params);
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut best = vae.params.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let frames: Vec<&Observation> = chunk.iter().map(|&i| train[i]).collect();
            let x = vae.batch_from_observations(&frames)?;
            let eps = noise(frames.len(), vae.latent_dim(), &mut rng);
            let (loss, grads) = vae.loss_and_grad(&x, &eps)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "VAE loss {} at epoch {epoch}, batch {b} (recon {}, kl {})",
                    loss.total, loss.recon, loss.kl
                )));
            }
            adam.step(&mut vae.params, &grads)
                .map_err(|e| Error::NonFinite(format!("VAE epoch {epoch}, batch {b}: {e}")))?;
            train_sum += loss.total * frames.len() as f64;
        }
        let test_loss = evaluate(&vae, test, 64, config.seed)?;
        if !test_loss.total.is_finite() {
            return Err(Error::NonFinite(format!("VAE test loss {} at epoch {epoch}", test_loss.total)));
        }
        log.push(VaeEpochLog {
            epoch,
            train_loss: train_sum / train.len() as f64,
            test_loss: test_loss.total,
            recon: test_loss.recon,
            kl: test_loss.kl,
        });
        let decision = stopper.observe(test_loss.total);
        if decision.improved {
            best = vae.params.clone();
        }
        if decision.stop {
            break;
        }
    }
    vae.params = best;
    Ok((vae, log))
}
