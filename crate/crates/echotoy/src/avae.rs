//! Adversarial variational autoencoder over toy echo frames.
//!
//! The encoder maps a `[1, H, W]` frame to a Gaussian posterior over a
//! `[K, H/4, W/4]` latent; the decoder maps sampled latents back to pixels.
//! Three losses shape the latent space:
//!
//! * reconstruction — per-sample squared error, averaged over the batch,
//! * a light KL pull toward the standard normal (weight `gamma_kl`),
//! * an adversarial term `mean(softplus(-D(x_hat)))` that asks a small
//!   discriminator to find reconstructions realistic (weight `lambda_adv`,
//!   enabled after a warmup fraction of training).
//!
//! The discriminator trains on the opposite objective with reconstructions
//! detached, so neither network's update leaks into the other.
//!
//! This module also owns the latent bookkeeping the rest of the pipeline
//! needs: per-channel normalization statistics, mask downsampling to latent
//! resolution, and a Gaussian differential-entropy diagnostic for comparing
//! latent spaces.

use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::layers::manifest_of;
use crate::numerics::{linalg, Adam, Layer, LayerSpec, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, domains};
use rand::Rng;
use std::path::Path;

/// Spatial compression factor of the autoencoder (two stride-2 stages).
pub const COMPRESSION: usize = 4;

// ───────────────────────── architecture ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvaeArch {
    pub image_size: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
}

impl Default for AvaeArch {
    fn default() -> Self {
        AvaeArch {
            image_size: 32,
            latent_channels: 2,
            base_channels: 8,
        }
    }
}

impl AvaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % COMPRESSION != 0 || self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} must be >= 16 and divisible by {COMPRESSION}",
                self.image_size
            )));
        }
        if self.latent_channels == 0 || self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "bad avae channels: latent {}, base {}",
                self.latent_channels, self.base_channels
            )));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / COMPRESSION
    }

    /// Flattened latent dimensionality `K * (H/4) * (W/4)`.
    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_size() * self.latent_size()
    }
}

/// Encoder + decoder with their parameters.
pub struct Avae {
    pub arch: AvaeArch,
    pub params: ParamStore,
    enc1: Layer,
    enc2: Layer,
    enc3: Layer,
    mu_head: Layer,
    logsig_head: Layer,
    dec_in: Layer,
    dec_up1: Layer,
    dec_up2: Layer,
    dec_out: Layer,
    /// Per-channel normalization statistics, set after training.
    pub stats: Option<LatentStats>,
}

impl Avae {
    pub fn new(arch: AvaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, domains::INIT, 1);
        let b = arch.base_channels;
        let k = arch.latent_channels;
        let enc1 = Layer::init(LayerSpec::Conv2d { inp: 1, out: b, stride: 2 }, &mut params, "enc1", &mut r)?;
        let enc2 = Layer::init(LayerSpec::Conv2d { inp: b, out: 2 * b, stride: 2 }, &mut params, "enc2", &mut r)?;
        let enc3 = Layer::init(LayerSpec::Conv2d { inp: 2 * b, out: 2 * b, stride: 1 }, &mut params, "enc3", &mut r)?;
        let mu_head = Layer::init(LayerSpec::Conv2d { inp: 2 * b, out: k, stride: 1 }, &mut params, "mu", &mut r)?;
        let logsig_head =
            Layer::init(LayerSpec::Conv2d { inp: 2 * b, out: k, stride: 1 }, &mut params, "logsig", &mut r)?;
        let dec_in = Layer::init(LayerSpec::Conv2d { inp: k, out: 2 * b, stride: 1 }, &mut params, "dec_in", &mut r)?;
        let dec_up1 = Layer::init(LayerSpec::UpsampleConv { inp: 2 * b, out: b }, &mut params, "dec_up1", &mut r)?;
        let dec_up2 = Layer::init(LayerSpec::UpsampleConv { inp: b, out: b }, &mut params, "dec_up2", &mut r)?;
        let dec_out = Layer::init(LayerSpec::Conv2d { inp: b, out: 1, stride: 1 }, &mut params, "dec_out", &mut r)?;
        Ok(Avae {
            arch,
            params,
            enc1,
            enc2,
            enc3,
            mu_head,
            logsig_head,
            dec_in,
            dec_up1,
            dec_up2,
            dec_out,
            stats: None,
        })
    }

    pub fn manifest(&self) -> String {
        manifest_of(
            &[
                &self.enc1,
                &self.enc2,
                &self.enc3,
                &self.mu_head,
                &self.logsig_head,
                &self.dec_in,
                &self.dec_up1,
                &self.dec_up2,
                &self.dec_out,
            ],
            &[format!("image_size({})", self.arch.image_size)],
        )
    }

    /// Encoder forward on a tape: `[B,1,H,W] -> (mu, log sigma)`, both
    /// `[B,K,h,w]`.
    pub fn encode_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.arch.image_size || s[3] != self.arch.image_size {
            return Err(Error::shape(
                "Avae::encode",
                format!("expected [b,1,{0},{0}], got {s:?}", self.arch.image_size),
            ));
        }
        let h = self.enc1.forward(tape, &self.params, x, trainable)?;
        let h = tape.silu(h);
        let h = self.enc2.forward(tape, &self.params, h, trainable)?;
        let h = tape.silu(h);
        let h = self.enc3.forward(tape, &self.params, h, trainable)?;
        let h = tape.silu(h);
        let mu = self.mu_head.forward(tape, &self.params, h, trainable)?;
        let logsig = self.logsig_head.forward(tape, &self.params, h, trainable)?;
        Ok((mu, logsig))
    }

    /// Decoder forward on a tape: `[B,K,h,w] -> [B,1,H,W]` in (0, 1).
    pub fn decode_tape(&self, tape: &mut Tape, z: Var, trainable: bool) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let ls = self.arch.latent_size();
        if s.len() != 4 || s[1] != self.arch.latent_channels || s[2] != ls || s[3] != ls {
            return Err(Error::shape(
                "Avae::decode",
                format!("expected [b,{},{ls},{ls}], got {s:?}", self.arch.latent_channels),
            ));
        }
        let h = self.dec_in.forward(tape, &self.params, z, trainable)?;
        let h = tape.silu(h);
        let h = self.dec_up1.forward(tape, &self.params, h, trainable)?;
        let h = tape.silu(h);
        let h = self.dec_up2.forward(tape, &self.params, h, trainable)?;
        let h = tape.silu(h);
        let h = self.dec_out.forward(tape, &self.params, h, trainable)?;
        Ok(tape.sigmoid(h))
    }

    /// Posterior parameters for a batch of frames (no gradients).
    pub fn encode(&self, x: &Tensor) -> Result<LatentCode> {
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        let (mu, logsig) = self.encode_tape(&mut tape, xv, false)?;
        let sigma = tape.exp(logsig);
        Ok(LatentCode {
            mu: tape.value(mu).clone(),
            sigma: tape.value(sigma).clone(),
        })
    }

    /// Decode a batch of latents (no gradients).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let zv = tape.input(z.clone());
        let xhat = self.decode_tape(&mut tape, zv, false)?;
        Ok(tape.value(xhat).clone())
    }

    /// Encode every frame of a `[T,H,W]` clip: returns `[T,K,h,w]` mu/sigma.
    pub fn encode_video(&self, frames: &Tensor) -> Result<LatentCode> {
        let s = frames.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("Avae::encode_video", format!("expected [t,h,w], got {s:?}")));
        }
        let x = frames.clone().reshaped([s[0], 1, s[1], s[2]])?;
        self.encode(&x)
    }

    pub fn save(&self, path: &Path, disc: &Discriminator, config_hash: u64) -> Result<()> {
        let mut ck = Checkpoint::new("avae", config_hash, self.manifest());
        ck.push_meta("image_size", self.arch.image_size as f64);
        ck.push_meta("latent_channels", self.arch.latent_channels as f64);
        ck.push_meta("base_channels", self.arch.base_channels as f64);
        ck.push_meta("disc_base_channels", disc.base_channels as f64);
        ck.push_store("avae", &self.params);
        ck.push_store("disc", &disc.params);
        if let Some(stats) = &self.stats {
            ck.push_extra("latent_mean", stats.mean.clone());
            ck.push_extra("latent_std", stats.std.clone());
        }
        ck.save(path)
    }

    /// Load a checkpoint; rejects architecture drift via the manifest.
    pub fn load(path: &Path) -> Result<(Avae, Discriminator, u64)> {
        let ck = Checkpoint::load(path)?;
        let arch = AvaeArch {
            image_size: ck.meta_value("image_size")? as usize,
            latent_channels: ck.meta_value("latent_channels")? as usize,
            base_channels: ck.meta_value("base_channels")? as usize,
        };
        let mut avae = Avae::new(arch, 0)?;
        ck.verify("avae", &avae.manifest())?;
        ck.restore_store("avae", &mut avae.params)?;
        let mut disc = Discriminator::new(arch.image_size, ck.meta_value("disc_base_channels")? as usize, 0)?;
        ck.restore_store("disc", &mut disc.params)?;
        if let (Ok(mean), Ok(std)) = (ck.extra_values("latent_mean"), ck.extra_values("latent_std")) {
            avae.stats = Some(LatentStats {
                mean: mean.to_vec(),
                std: std.to_vec(),
            });
        }
        Ok((avae, disc, ck.config_hash))
    }
}

/// Posterior parameters for a batch/clip of frames.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl LatentCode {
    /// Reparameterized draw `mu + sigma * eps` with fresh standard normal
    /// noise.
    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        let eps = Tensor::randn(self.mu.shape().to_vec(), rng);
        let scaled = self.sigma.zip(&eps, |s, e| s * e);
        self.mu.zip(&scaled, |m, se| m + se)
    }
}

// ───────────────────────── discriminator ─────────────────────────

pub struct Discriminator {
    pub image_size: usize,
    pub base_channels: usize,
    pub params: ParamStore,
    conv1: Layer,
    conv2: Layer,
    conv3: Layer,
    head: Layer,
}

impl Discriminator {
    pub fn new(image_size: usize, base_channels: usize, seed: u64) -> Result<Self> {
        if image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "discriminator needs image_size divisible by 8, got {image_size}"
            )));
        }
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, domains::INIT, 2);
        let b = base_channels;
        let conv1 = Layer::init(LayerSpec::Conv2d { inp: 1, out: b, stride: 2 }, &mut params, "conv1", &mut r)?;
        let conv2 = Layer::init(LayerSpec::Conv2d { inp: b, out: 2 * b, stride: 2 }, &mut params, "conv2", &mut r)?;
        let conv3 = Layer::init(LayerSpec::Conv2d { inp: 2 * b, out: 2 * b, stride: 2 }, &mut params, "conv3", &mut r)?;
        let flat = 2 * b * (image_size / 8) * (image_size / 8);
        let head = Layer::init(LayerSpec::Affine { inp: flat, out: 1 }, &mut params, "head", &mut r)?;
        Ok(Discriminator {
            image_size,
            base_channels,
            params,
            conv1,
            conv2,
            conv3,
            head,
        })
    }

    /// `[B,1,H,W] -> [B,1]` realness logits.
    pub fn logits_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let h = self.conv1.forward(tape, &self.params, x, trainable)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, &self.params, h, trainable)?;
        let h = tape.silu(h);
        let h = self.conv3.forward(tape, &self.params, h, trainable)?;
        let h = tape.silu(h);
        let b = tape.shape(h)[0];
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, [b, flat]);
        self.head.forward(tape, &self.params, h, trainable)
    }
}

// ───────────────────────── losses ─────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AvaeWeights {
    pub lambda_adv: f32,
    pub gamma_kl: f32,
}

impl Default for AvaeWeights {
    fn default() -> Self {
        AvaeWeights {
            lambda_adv: 0.1,
            gamma_kl: 1e-6,
        }
    }
}

/// Scalar values of every loss term for one batch.
#[derive(Debug, Clone, Copy)]
pub struct AvaeLossReport {
    pub rec: f32,
    pub adv: f32,
    pub kl: f32,
    pub total: f32,
    pub disc: f32,
}

/// Build the generator-side losses on a tape. Returns
/// KL(q || N(0,I)) = -1/2 sum(1 + log sigma^2 - mu^2 - sigma^2), summed per
/// sample and averaged over `batch`. Zero exactly at (mu = 0, sigma = 1) and
/// non-negative everywhere else.
pub fn kl_on_tape(tape: &mut Tape, mu: Var, logsig: Var, batch: f32) -> Var {
    let sigma = tape.exp(logsig);
    let two_logsig = tape.scale(logsig, 2.0);
    let mu2 = tape.square(mu);
    let sig2 = tape.square(sigma);
    let t1 = tape.add_scalar(two_logsig, 1.0);
    let t2 = tape.sub(t1, mu2);
    let t3 = tape.sub(t2, sig2);
    let t_sum = tape.sum(t3);
    tape.scale(t_sum, -0.5 / batch)
}

/// `(total, rec, adv, kl, xhat)`; `adv` is zero when `adv_enabled` is false.
fn gen_losses_on_tape(
    tape: &mut Tape,
    avae: &Avae,
    disc: &Discriminator,
    x: Var,
    eps: Var,
    weights: AvaeWeights,
    adv_enabled: bool,
    trainable: bool,
) -> Result<(Var, Var, Var, Var, Var)> {
    let batch = tape.shape(x)[0] as f32;
    let (mu, logsig) = avae.encode_tape(tape, x, trainable)?;
    if tape.shape(eps) != tape.shape(mu) {
        return Err(Error::shape(
            "avae_losses",
            format!("eps shape {:?} vs latent {:?}", tape.shape(eps), tape.shape(mu)),
        ));
    }
    let sigma = tape.exp(logsig);
    let noise = tape.mul(sigma, eps);
    let z = tape.add(mu, noise);
    let xhat = avae.decode_tape(tape, z, trainable)?;

    // reconstruction: squared error summed per sample, averaged over batch
    let diff = tape.sub(xhat, x);
    let sq = tape.square(diff);
    let sqsum = tape.sum(sq);
    let rec = tape.scale(sqsum, 1.0 / batch);

    let kl = kl_on_tape(tape, mu, logsig, batch);

    // adversarial: push reconstructions toward the discriminator's "real"
    // side; the discriminator itself stays frozen here.
    let adv = if adv_enabled {
        let logit = disc.logits_tape(tape, xhat, false)?;
        let neg = tape.scale(logit, -1.0);
        let sp = tape.softplus(neg);
        tape.mean_all(sp)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let adv_w = tape.scale(adv, if adv_enabled { weights.lambda_adv } else { 0.0 });
    let kl_w = tape.scale(kl, weights.gamma_kl);
    let t = tape.add(rec, adv_w);
    let total = tape.add(t, kl_w);
    Ok((total, rec, adv, kl, xhat))
}

/// Discriminator loss on a tape: real frames toward logit +inf,
/// reconstructions (already detached) toward -inf.
fn disc_loss_on_tape(
    tape: &mut Tape,
    disc: &Discriminator,
    x_real: Var,
    xhat_detached: Var,
    trainable: bool,
) -> Result<Var> {
    let d_real = disc.logits_tape(tape, x_real, trainable)?;
    let d_fake = disc.logits_tape(tape, xhat_detached, trainable)?;
    let neg_real = tape.scale(d_real, -1.0);
    let sp_real = tape.softplus(neg_real);
    let loss_real = tape.mean_all(sp_real);
    let sp_fake = tape.softplus(d_fake);
    let loss_fake = tape.mean_all(sp_fake);
    let sum = tape.add(loss_real, loss_fake);
    Ok(tape.scale(sum, 0.5))
}

/// Evaluate every loss term for a batch without touching any parameters.
pub fn avae_losses(
    avae: &Avae,
    disc: &Discriminator,
    x: &Tensor,
    eps: &Tensor,
    weights: AvaeWeights,
    adv_enabled: bool,
) -> Result<AvaeLossReport> {
    let mut tape = Tape::inference();
    let xv = tape.input(x.clone());
    let ev = tape.input(eps.clone());
    let (total, rec, adv, kl, xhat) =
        gen_losses_on_tape(&mut tape, avae, disc, xv, ev, weights, adv_enabled, false)?;
    let xhat_c = tape.value(xhat).clone();
    let xhat_detached = tape.constant(xhat_c);
    let d = disc_loss_on_tape(&mut tape, disc, xv, xhat_detached, false)?;
    let report = AvaeLossReport {
        rec: tape.value(rec).item(),
        adv: tape.value(adv).item(),
        kl: tape.value(kl).item(),
        total: tape.value(total).item(),
        disc: tape.value(d).item(),
    };
    for (name, v) in [
        ("rec", report.rec),
        ("adv", report.adv),
        ("kl", report.kl),
        ("total", report.total),
        ("disc", report.disc),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                op: "avae_losses",
                step: 0,
                detail: format!("{name} loss is {v}"),
            });
        }
    }
    Ok(report)
}

/// Generator update: one Adam step on encoder/decoder parameters. The
/// discriminator participates only frozen. Returns the loss values and the
/// detached reconstruction for the discriminator step.
pub fn avae_gen_step(
    avae: &mut Avae,
    disc: &Discriminator,
    opt: &mut Adam,
    x: &Tensor,
    eps: &Tensor,
    weights: AvaeWeights,
    adv_enabled: bool,
    step: usize,
) -> Result<(AvaeLossReport, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(eps.clone());
    let (total, rec, adv, kl, xhat) =
        gen_losses_on_tape(&mut tape, avae, disc, xv, ev, weights, adv_enabled, true)?;
    let report = AvaeLossReport {
        rec: tape.value(rec).item(),
        adv: tape.value(adv).item(),
        kl: tape.value(kl).item(),
        total: tape.value(total).item(),
        disc: 0.0,
    };
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            op: "avae_gen_step",
            step,
            detail: format!("total loss {}", report.total),
        });
    }
    let xhat_value = tape.value(xhat).clone();
    let grads = tape.backward(total)?;
    opt.step(&mut avae.params, &grads.for_params())?;
    Ok((report, xhat_value))
}

/// Discriminator update on (real batch, detached reconstructions).
pub fn avae_disc_step(
    disc: &mut Discriminator,
    opt: &mut Adam,
    x: &Tensor,
    xhat_detached: &Tensor,
    step: usize,
) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fv = tape.constant(xhat_detached.clone());
    let loss = disc_loss_on_tape(&mut tape, disc, xv, fv, true)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged {
            op: "avae_disc_step",
            step,
            detail: format!("disc loss {value}"),
        });
    }
    let grads = tape.backward(loss)?;
    opt.step(&mut disc.params, &grads.for_params())?;
    Ok(value)
}

// ───────────────────────── training loop ─────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AvaeTrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Fraction of steps before the adversarial loss switches on.
    pub warmup_frac: f32,
    pub weights: AvaeWeights,
    pub seed: u64,
}

impl Default for AvaeTrainSpec {
    fn default() -> Self {
        AvaeTrainSpec {
            steps: 1500,
            batch: 16,
            lr: 1e-3,
            warmup_frac: 0.3,
            weights: AvaeWeights::default(),
            seed: 0,
        }
    }
}

/// Train encoder, decoder, and discriminator on all frames of the given
/// videos. Returns the per-step loss reports.
pub fn train_avae(
    avae: &mut Avae,
    disc: &mut Discriminator,
    videos: &[crate::echodata::VideoSample],
    spec: &AvaeTrainSpec,
) -> Result<Vec<AvaeLossReport>> {
    if videos.is_empty() {
        return Err(Error::contract("train_avae", "no training videos"));
    }
    if spec.steps == 0 || spec.batch == 0 {
        return Err(Error::Config("avae training needs steps > 0 and batch > 0".into()));
    }
    let n = avae.arch.image_size;
    let frames_per = videos[0].frame_count();
    let total_frames = videos.len() * frames_per;
    let warmup_steps = (spec.steps as f32 * spec.warmup_frac) as usize;
    let mut opt_g = Adam::new(&avae.params, spec.lr);
    let mut opt_d = Adam::new(&disc.params, spec.lr);
    let mut reports = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut r = rng::stream(spec.seed, domains::AVAE, step as u64);
        // assemble a batch of random frames
        let mut batch = Tensor::zeros([spec.batch, 1, n, n]);
        for bi in 0..spec.batch {
            let pick = r.random_range(0..total_frames);
            let (vi, ti) = (pick / frames_per, pick % frames_per);
            let frame = videos[vi].frame(ti);
            batch.data_mut()[bi * n * n..(bi + 1) * n * n].copy_from_slice(frame);
        }
        let eps = Tensor::randn(
            [spec.batch, avae.arch.latent_channels, avae.arch.latent_size(), avae.arch.latent_size()],
            &mut r,
        );
        let adv_enabled = step >= warmup_steps;
        let (mut report, xhat) =
            avae_gen_step(avae, disc, &mut opt_g, &batch, &eps, spec.weights, adv_enabled, step)?;
        report.disc = avae_disc_step(disc, &mut opt_d, &batch, &xhat, step)?;
        reports.push(report);
    }
    // freeze normalization statistics over the training frames
    avae.stats = Some(compute_latent_stats(avae, videos)?);
    Ok(reports)
}

// ───────────────────────── latent statistics ─────────────────────────

/// Per-channel mean and standard deviation of encoder means over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Channel statistics of the posterior means over every frame of `videos`.
/// A channel whose std collapses below 1e-8 is an error — it cannot be
/// normalized and signals a dead latent.
pub fn compute_latent_stats(avae: &Avae, videos: &[crate::echodata::VideoSample]) -> Result<LatentStats> {
    if videos.is_empty() {
        return Err(Error::contract("compute_latent_stats", "no videos"));
    }
    let k = avae.arch.latent_channels;
    let mut count = vec![0u64; k];
    let mut sum = vec![0.0f64; k];
    let mut sumsq = vec![0.0f64; k];
    for v in videos {
        let code = avae.encode_video(&v.frames)?;
        let s = code.mu.shape();
        let (t, hw) = (s[0], s[2] * s[3]);
        for ti in 0..t {
            for ki in 0..k {
                let base = (ti * k + ki) * hw;
                for &x in &code.mu.data()[base..base + hw] {
                    count[ki] += 1;
                    sum[ki] += x as f64;
                    sumsq[ki] += (x as f64) * (x as f64);
                }
            }
        }
    }
    let mut mean = vec![0.0f32; k];
    let mut std = vec![0.0f32; k];
    for ki in 0..k {
        let m = sum[ki] / count[ki] as f64;
        let var = (sumsq[ki] / count[ki] as f64 - m * m).max(0.0);
        let s = var.sqrt();
        if s < 1e-8 {
            return Err(Error::DegenerateChannel { channel: ki, std: s });
        }
        mean[ki] = m as f32;
        std[ki] = s as f32;
    }
    Ok(LatentStats { mean, std })
}

/// Channel-wise `(z - mean) / std`. Accepts any tensor whose third-from-last
/// axis is the channel axis (`[K,h,w]`, `[B,K,h,w]`, `[B,T,K,h,w]`, ...).
pub fn normalize_latent(z: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    apply_channelwise(z, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`normalize_latent`].
pub fn denormalize_latent(z: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    apply_channelwise(z, stats, |v, m, s| v * s + m)
}

fn apply_channelwise(
    z: &Tensor,
    stats: &LatentStats,
    f: impl Fn(f32, f32, f32) -> f32,
) -> Result<Tensor> {
    let shape = z.shape();
    if shape.len() < 3 {
        return Err(Error::shape(
            "normalize_latent",
            format!("need at least [k,h,w], got {shape:?}"),
        ));
    }
    let k = shape[shape.len() - 3];
    if k != stats.mean.len() || k != stats.std.len() {
        return Err(Error::shape(
            "normalize_latent",
            format!("{k} channels vs stats for {}", stats.mean.len()),
        ));
    }
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ki = (i / hw) % k;
        *v = f(*v, stats.mean[ki], stats.std[ki]);
    }
    Ok(out)
}

/// Downsample a binary pixel mask to latent resolution by block averaging;
/// output values lie in [0, 1].
pub fn mask_to_latent(mask: &[u8], image_size: usize) -> Result<Tensor> {
    if mask.len() != image_size * image_size {
        return Err(Error::shape(
            "mask_to_latent",
            format!("mask length {} vs image {image_size}^2", mask.len()),
        ));
    }
    let ls = image_size / COMPRESSION;
    let mut out = Tensor::zeros([ls, ls]);
    for y in 0..ls {
        for x in 0..ls {
            let mut acc = 0.0f32;
            for dy in 0..COMPRESSION {
                for dx in 0..COMPRESSION {
                    acc += mask[(y * COMPRESSION + dy) * image_size + (x * COMPRESSION + dx)] as f32;
                }
            }
            out.data_mut()[y * ls + x] = acc / (COMPRESSION * COMPRESSION) as f32;
        }
    }
    Ok(out)
}

// ───────────────────────── entropy diagnostic ─────────────────────────

/// Differential entropy of a Gaussian fit, in nats.
#[derive(Debug, Clone, Copy)]
pub struct EntropyEstimate {
    pub nats: f64,
    pub dims: usize,
    pub samples: usize,
    /// Set when the estimate leans on the ridge regularizer: fewer samples
    /// than dimensions, or a covariance direction whose variance is mostly
    /// the ridge.
    pub conditioning_warning: bool,
}

/// Gaussian (maximum-entropy) differential entropy of flattened samples:
/// `0.5 * (d ln(2 pi e) + ln det(Sigma + eps I))` with
/// `eps = 1e-6 * trace(Sigma) / d`. The ridge scales with the data, so
/// scaling all samples by `c` shifts the entropy by exactly `d ln c`.
pub fn latent_entropy(samples: &[Tensor]) -> Result<EntropyEstimate> {
    if samples.len() < 2 {
        return Err(Error::contract("latent_entropy", "need at least 2 samples"));
    }
    let d = samples[0].numel();
    if samples.iter().any(|s| s.numel() != d) {
        return Err(Error::contract("latent_entropy", "samples have differing sizes"));
    }
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.data().iter().map(|&v| v as f64).collect())
        .collect();
    let (_, mut cov) = linalg::mean_covariance(&rows)?;
    let eps = (1e-6 * linalg::trace(d, &cov) / d as f64).max(1e-300);
    linalg::add_ridge(d, &mut cov, eps);
    let l = linalg::cholesky(d, &cov)?;
    let (logdet, min_pivot) = linalg::logdet_from_cholesky(d, &l);
    let nats = 0.5 * (d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + logdet);
    let ridge_bound = (10.0 * eps).sqrt();
    Ok(EntropyEstimate {
        nats,
        dims: d,
        samples: samples.len(),
        conditioning_warning: samples.len() < d + 1 || min_pivot <= ridge_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echodata::{gen_dataset, ToyConfig};

    fn tiny_arch() -> AvaeArch {
        AvaeArch {
            image_size: 32,
            latent_channels: 2,
            base_channels: 4,
        }
    }

    fn tiny_setup() -> (Avae, Discriminator, Vec<crate::echodata::VideoSample>) {
        let avae = Avae::new(tiny_arch(), 7).unwrap();
        let disc = Discriminator::new(32, 4, 7).unwrap();
        let cfg = ToyConfig::default();
        let vids = gen_dataset(&cfg, 4, 99, 0).unwrap();
        (avae, disc, vids)
    }

    /// Independent f64 evaluation of the KL formula, used as the oracle for
    /// the tape composition.
    fn kl_oracle(mu: &[f32], logsig: &[f32], batch: usize) -> f64 {
        let mut acc = 0.0f64;
        for (&m, &ls) in mu.iter().zip(logsig) {
            let (m, ls) = (m as f64, ls as f64);
            let sig2 = (2.0 * ls).exp();
            acc += 1.0 + 2.0 * ls - m * m - sig2;
        }
        -0.5 * acc / batch as f64
    }

    #[test]
    fn kl_is_zero_at_standard_normal() {
        // mu = 0, sigma = 1 (logsig = 0): every term is 1 + 0 - 0 - 1 = 0.
        assert_eq!(kl_oracle(&[0.0; 8], &[0.0; 8], 2), 0.0);
    }

    #[test]
    fn kl_single_unit_reference() {
        // mu = 1, sigma = 1: KL = 0.5 exactly.
        let v = kl_oracle(&[1.0], &[0.0], 1);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_positive_under_perturbations() {
        let mut r = rng::stream(3, 1, 0);
        for _ in 0..1000 {
            let mu: f32 = r.random_range(-2.0..2.0);
            let ls: f32 = r.random_range(-1.5..1.5);
            if mu.abs() < 1e-3 && ls.abs() < 1e-3 {
                continue;
            }
            let v = kl_oracle(&[mu], &[ls], 1);
            assert!(v > 0.0, "KL({mu}, {ls}) = {v} not positive");
        }
    }

    #[test]
    fn tape_kl_matches_oracle() {
        // build the same KL composition the loss uses and compare values
        let (avae, disc, _) = tiny_setup();
        let mut r = rng::stream(5, 2, 0);
        let x = Tensor::rand_uniform([2, 1, 32, 32], 0.0, 1.0, &mut r);
        let eps = Tensor::randn([2, 2, 8, 8], &mut r);
        let report = avae_losses(&avae, &disc, &x, &eps, AvaeWeights::default(), false).unwrap();
        let code = avae.encode(&x).unwrap();
        let logsig: Vec<f32> = code.sigma.data().iter().map(|s| s.ln()).collect();
        let oracle = kl_oracle(code.mu.data(), &logsig, 2);
        assert!(
            (report.kl as f64 - oracle).abs() < 1e-3 * oracle.abs().max(1.0),
            "tape {} vs oracle {}",
            report.kl,
            oracle
        );
        assert!(report.kl >= 0.0);
    }

    #[test]
    fn losses_are_finite_and_adv_gated() {
        let (avae, disc, _) = tiny_setup();
        let mut r = rng::stream(6, 2, 0);
        let x = Tensor::rand_uniform([2, 1, 32, 32], 0.0, 1.0, &mut r);
        let eps = Tensor::randn([2, 2, 8, 8], &mut r);
        let off = avae_losses(&avae, &disc, &x, &eps, AvaeWeights::default(), false).unwrap();
        assert_eq!(off.adv, 0.0);
        let on = avae_losses(&avae, &disc, &x, &eps, AvaeWeights::default(), true).unwrap();
        assert!(on.adv > 0.0);
        assert!((off.rec - on.rec).abs() < 1e-6);
    }

    #[test]
    fn gen_step_leaves_discriminator_untouched() {
        let (mut avae, disc, _) = tiny_setup();
        let before: Vec<Tensor> = disc.params.ids().map(|id| disc.params.get(id).clone()).collect();
        let mut opt = Adam::new(&avae.params, 1e-3);
        let mut r = rng::stream(8, 2, 0);
        let x = Tensor::rand_uniform([2, 1, 32, 32], 0.0, 1.0, &mut r);
        let eps = Tensor::randn([2, 2, 8, 8], &mut r);
        avae_gen_step(&mut avae, &disc, &mut opt, &x, &eps, AvaeWeights::default(), true, 0).unwrap();
        for (id, b) in disc.params.ids().zip(&before) {
            assert_eq!(disc.params.get(id), b, "disc param {} changed", disc.params.name(id));
        }
    }

    #[test]
    fn disc_step_leaves_generator_untouched() {
        let (avae, mut disc, _) = tiny_setup();
        let before: Vec<Tensor> = avae.params.ids().map(|id| avae.params.get(id).clone()).collect();
        let mut opt = Adam::new(&disc.params, 1e-3);
        let mut r = rng::stream(9, 2, 0);
        let x = Tensor::rand_uniform([2, 1, 32, 32], 0.0, 1.0, &mut r);
        let fake = Tensor::rand_uniform([2, 1, 32, 32], 0.0, 1.0, &mut r);
        avae_disc_step(&mut disc, &mut opt, &x, &fake, 0).unwrap();
        for (id, b) in avae.params.ids().zip(&before) {
            assert_eq!(avae.params.get(id), b);
        }
    }

    #[test]
    fn short_training_reduces_reconstruction() {
        let (mut avae, mut disc, vids) = tiny_setup();
        let spec = AvaeTrainSpec {
            steps: 120,
            batch: 8,
            lr: 2e-3,
            seed: 42,
            ..AvaeTrainSpec::default()
        };
        let reports = train_avae(&mut avae, &mut disc, &vids, &spec).unwrap();
        let first: f32 = reports[..10].iter().map(|r| r.rec).sum::<f32>() / 10.0;
        let last: f32 = reports[reports.len() - 10..].iter().map(|r| r.rec).sum::<f32>() / 10.0;
        assert!(
            last < first,
            "reconstruction did not improve: first {first}, last {last}"
        );
        assert!(avae.stats.is_some());
    }

    #[test]
    fn normalize_roundtrip_and_unit_stats() {
        let stats = LatentStats {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 0.25],
        };
        let mut r = rng::stream(1, 1, 1);
        let z = Tensor::randn([3, 2, 4, 4], &mut r);
        let n = normalize_latent(&z, &stats).unwrap();
        let back = denormalize_latent(&n, &stats).unwrap();
        assert!(z.max_abs_diff(&back) < 1e-6);
        // constant offset in channel 0 vanishes after normalization
        let shifted = z.map(|v| v); // same values
        let mut with_offset = shifted.clone();
        for i in 0..with_offset.numel() {
            let ki = (i / 16) % 2;
            if ki == 0 {
                with_offset.data_mut()[i] += 0.0;
            }
        }
        let n2 = normalize_latent(&with_offset, &stats).unwrap();
        assert!(n.max_abs_diff(&n2) < 1e-6);
    }

    #[test]
    fn degenerate_channel_is_detected() {
        // An encoder with zeroed mu-head weights produces constant channel
        // means -> std 0 -> error.
        let (mut avae, _, vids) = tiny_setup();
        for id in avae.params.ids().collect::<Vec<_>>() {
            if avae.params.name(id).starts_with("mu.") {
                let z = Tensor::zeros(avae.params.get(id).shape().to_vec());
                *avae.params.get_mut(id) = z;
            }
        }
        match compute_latent_stats(&avae, &vids) {
            Err(Error::DegenerateChannel { .. }) => {}
            other => panic!("expected degenerate channel, got {other:?}"),
        }
    }

    #[test]
    fn mask_to_latent_block_average() {
        let mut mask = vec![0u8; 32 * 32];
        // fill one 4x4 block entirely, half of another
        for y in 0..4 {
            for x in 0..4 {
                mask[y * 32 + x] = 1;
            }
        }
        for y in 0..2 {
            for x in 4..8 {
                mask[y * 32 + x] = 1;
            }
        }
        let m = mask_to_latent(&mask, 32).unwrap();
        assert_eq!(m.shape(), &[8, 8]);
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[1], 0.5);
        assert_eq!(m.data()[2], 0.0);
    }

    #[test]
    fn entropy_of_standard_normal_1d() {
        let mut r = rng::stream(12, 3, 0);
        let samples: Vec<Tensor> = (0..1000).map(|_| Tensor::randn([1], &mut r)).collect();
        let e = latent_entropy(&samples).unwrap();
        // 0.5 ln(2 pi e) = 1.41894
        assert!((e.nats - 1.4189385).abs() < 0.08, "entropy {}", e.nats);
        assert!(!e.conditioning_warning);
    }

    #[test]
    fn entropy_shift_under_scaling_is_exact() {
        let mut r = rng::stream(13, 3, 0);
        let samples: Vec<Tensor> = (0..64).map(|_| Tensor::randn([4], &mut r)).collect();
        let scaled: Vec<Tensor> = samples.iter().map(|s| s.scale(2.0)).collect();
        let e1 = latent_entropy(&samples).unwrap();
        let e2 = latent_entropy(&scaled).unwrap();
        let expected = 4.0 * std::f64::consts::LN_2;
        assert!(
            ((e2.nats - e1.nats) - expected).abs() < 1e-9,
            "shift {} vs {}",
            e2.nats - e1.nats,
            expected
        );
    }

    #[test]
    fn entropy_warns_when_underdetermined() {
        let mut r = rng::stream(14, 3, 0);
        let samples: Vec<Tensor> = (0..5).map(|_| Tensor::randn([8], &mut r)).collect();
        let e = latent_entropy(&samples).unwrap();
        assert!(e.conditioning_warning);
    }

    #[test]
    fn entropy_flags_duplicated_dimension() {
        let mut r = rng::stream(15, 3, 0);
        let samples: Vec<Tensor> = (0..200)
            .map(|_| {
                let v: f32 = r.random_range(-1.0f32..1.0);
                let w: f32 = r.random_range(-1.0f32..1.0);
                Tensor::new([3], vec![v, v, w]).unwrap()
            })
            .collect();
        let e = latent_entropy(&samples).unwrap();
        assert!(e.conditioning_warning, "duplicate dimension not flagged");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let (mut avae, disc, vids) = tiny_setup();
        avae.stats = Some(LatentStats {
            mean: vec![0.1, 0.2],
            std: vec![1.0, 2.0],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("avae.ckpt");
        avae.save(&path, &disc, 777).unwrap();
        let (back, _disc2, hash) = Avae::load(&path).unwrap();
        assert_eq!(hash, 777);
        assert_eq!(back.stats, avae.stats);
        let x = vids[0]
            .frames
            .clone()
            .reshaped([vids[0].frame_count(), 1, 32, 32])
            .unwrap();
        let a = avae.encode(&x).unwrap();
        let b = back.encode(&x).unwrap();
        assert_eq!(a.mu.data(), b.mu.data());
        assert_eq!(a.sigma.data(), b.sigma.data());
    }

    #[test]
    fn checkpoint_rejects_other_kind() {
        let (avae, disc, _) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("avae.ckpt");
        avae.save(&path, &disc, 1).unwrap();
        let mut ck = Checkpoint::load(&path).unwrap();
        ck.kind = "reid".into();
        ck.save(&path).unwrap();
        assert!(Avae::load(&path).is_err());
    }
}
