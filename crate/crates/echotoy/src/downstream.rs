//! Downstream ejection-fraction regression and the evaluation tooling built
//! around it: regression metrics, synthetic-label replacement with a
//! pretrained regressor, and a Fréchet distance between embedding clouds as
//! a distributional proxy for generation quality.
//!
//! The regressor is the measurement instrument of the whole pipeline: the
//! parity experiment trains one copy on real clips and one on synthetic
//! clips and compares their test metrics on held-out real data.

use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::linalg::{add_ridge, matmul_f64, mean_covariance, sqrtm_psd, sym_eigen, trace};
use crate::numerics::layers::manifest_of;
use crate::numerics::{Adam, Layer, LayerSpec, ParamStore, Tape, Tensor, Var};
use crate::reid::ReIdEncoder;
use crate::rng::{self, domains};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Largest storable EF label; relabeled values are clamped into `[0, 100)`.
pub const LABEL_CEIL: f32 = 99.999;

// ───────────────────────── metrics ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

impl RegressionMetrics {
    /// CSV row matching the header `r2,mae,rmse,n`.
    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{}", self.r2, self.mae, self.rmse, self.n)
    }
}

/// R² = 1 − SS_res/SS_tot, MAE, RMSE over paired labels and predictions.
pub fn metrics(y: &[f32], yhat: &[f32]) -> Result<RegressionMetrics> {
    if y.len() != yhat.len() {
        return Err(Error::contract(
            "metrics",
            format!("{} labels vs {} predictions", y.len(), yhat.len()),
        ));
    }
    if y.len() < 2 {
        return Err(Error::contract("metrics", "need at least 2 pairs"));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::contract("metrics", "non-finite value"));
    }
    let n = y.len();
    let mean: f64 = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mut ss_tot = 0.0f64;
    let mut ss_res = 0.0f64;
    let mut abs = 0.0f64;
    for i in 0..n {
        let d = y[i] as f64 - yhat[i] as f64;
        ss_res += d * d;
        abs += d.abs();
        let c = y[i] as f64 - mean;
        ss_tot += c * c;
    }
    if ss_tot == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant labels leave R² undefined".into(),
        ));
    }
    Ok(RegressionMetrics {
        r2: 1.0 - ss_res / ss_tot,
        mae: abs / n as f64,
        rmse: (ss_res / n as f64).sqrt(),
        n,
    })
}

// ───────────────────────── regressor ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfArch {
    pub frames: usize,
    pub image_size: usize,
    /// First conv width; doubled once downstream.
    pub channels: usize,
}

impl Default for EfArch {
    fn default() -> Self {
        EfArch {
            frames: 16,
            image_size: 32,
            channels: 8,
        }
    }
}

impl EfArch {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.channels == 0 {
            return Err(Error::Config(format!("degenerate regressor geometry {self:?}")));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "regressor image size {} must be a positive multiple of 8 (three stride-2 convs)",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Spatio-temporal EF regressor: per-frame conv encoder, one learned
/// temporal mixing layer (so amplitude-of-motion features exist before
/// pooling), temporal mean pool, affine head. Trained on labels divided by
/// 100; predictions are rescaled back to percent.
pub struct EfRegressor {
    pub arch: EfArch,
    pub params: ParamStore,
    conv1: Layer,
    conv2: Layer,
    conv3: Layer,
    mix: Layer,
    head: Layer,
}

impl EfRegressor {
    pub fn new(arch: EfArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, domains::INIT, 5);
        let c = arch.channels;
        let conv1 = Layer::init(LayerSpec::Conv2d { inp: 1, out: c, stride: 2 }, &mut params, "conv1", &mut r)?;
        let conv2 = Layer::init(LayerSpec::Conv2d { inp: c, out: 2 * c, stride: 2 }, &mut params, "conv2", &mut r)?;
        let conv3 = Layer::init(LayerSpec::Conv2d { inp: 2 * c, out: 2 * c, stride: 2 }, &mut params, "conv3", &mut r)?;
        let mix = Layer::init(LayerSpec::TemporalMix { frames: arch.frames }, &mut params, "mix", &mut r)?;
        let head = Layer::init(LayerSpec::Affine { inp: 2 * c, out: 1 }, &mut params, "head", &mut r)?;
        Ok(EfRegressor {
            arch,
            params,
            conv1,
            conv2,
            conv3,
            mix,
            head,
        })
    }

    pub fn manifest(&self) -> String {
        manifest_of(
            &[&self.conv1, &self.conv2, &self.conv3, &self.mix, &self.head],
            &[format!("efreg(t{},s{})", self.arch.frames, self.arch.image_size)],
        )
    }

    /// Forward on a tape: `[B,T,H,W]` videos to `[B,1]` predictions in the
    /// `/100` label scale.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (t, hw, c) = (self.arch.frames, self.arch.image_size, self.arch.channels);
        if s.len() != 4 || s[1] != t || s[2] != hw || s[3] != hw {
            return Err(Error::shape(
                "ef_forward",
                format!("input {s:?}, expected [b,{t},{hw},{hw}]"),
            ));
        }
        let b = s[0];
        let p = &self.params;
        let xf = tape.reshape(x, [b * t, 1, hw, hw]);
        let h = self.conv1.forward(tape, p, xf, trainable)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h, trainable)?;
        let h = tape.silu(h);
        let h = self.conv3.forward(tape, p, h, trainable)?;
        let h = tape.silu(h);
        let g = tape.spatial_mean(h);
        let seq = tape.reshape(g, [b, t, 2 * c]);
        let mixed = self.mix.forward(tape, p, seq, trainable)?;
        let mixed = tape.silu(mixed);
        let pooled = tape.frame_mean(mixed);
        self.head.forward(tape, p, pooled, trainable)
    }

    /// Predict EF percent for a batch of `[T,H,W]` videos.
    pub fn predict_batch(&self, videos: &[Tensor]) -> Result<Vec<f32>> {
        let (t, hw) = (self.arch.frames, self.arch.image_size);
        let row = t * hw * hw;
        let mut out = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(8) {
            let mut stacked = Tensor::zeros([chunk.len(), t, hw, hw]);
            for (i, v) in chunk.iter().enumerate() {
                if v.shape() != [t, hw, hw] {
                    return Err(Error::shape(
                        "ef_predict",
                        format!("video {:?}, expected [{t},{hw},{hw}]", v.shape()),
                    ));
                }
                stacked.data_mut()[i * row..(i + 1) * row].copy_from_slice(v.data());
            }
            let mut tape = Tape::inference();
            let xv = tape.input(stacked);
            let pred = self.forward_tape(&mut tape, xv, false)?;
            for &v in tape.value(pred).data() {
                if !v.is_finite() {
                    return Err(Error::Numeric("non-finite EF prediction".into()));
                }
                out.push(100.0 * v);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, video: &Tensor) -> Result<f32> {
        Ok(self.predict_batch(std::slice::from_ref(video))?[0])
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let mut ck = Checkpoint::new("efreg", config_hash, self.manifest());
        ck.push_meta("frames", self.arch.frames as f64);
        ck.push_meta("image_size", self.arch.image_size as f64);
        ck.push_meta("channels", self.arch.channels as f64);
        ck.push_store("efreg", &self.params);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<(EfRegressor, u64)> {
        let ck = Checkpoint::load(path)?;
        let arch = EfArch {
            frames: ck.meta_value("frames")? as usize,
            image_size: ck.meta_value("image_size")? as usize,
            channels: ck.meta_value("channels")? as usize,
        };
        let mut model = EfRegressor::new(arch, 0)?;
        ck.verify("efreg", &model.manifest())?;
        ck.restore_store("efreg", &mut model.params)?;
        Ok((model, ck.config_hash))
    }
}

/// Anything that predicts EF percent for a list of videos; lets tests use
/// stub predictors where the relabeling contract is exercised.
pub trait EfPredictor {
    fn predict_all(&self, videos: &[Tensor]) -> Result<Vec<f32>>;
}

impl EfPredictor for EfRegressor {
    fn predict_all(&self, videos: &[Tensor]) -> Result<Vec<f32>> {
        self.predict_batch(videos)
    }
}

/// Replace every label with the predictor's output, clamped into `[0, 100)`.
pub fn relabel(videos: &[Tensor], predictor: &dyn EfPredictor) -> Result<Vec<f32>> {
    let preds = predictor.predict_all(videos)?;
    if preds.len() != videos.len() {
        return Err(Error::contract("relabel", "predictor returned wrong count"));
    }
    Ok(preds.iter().map(|&p| p.clamp(0.0, LABEL_CEIL)).collect())
}

// ───────────────────────── training ─────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EfTrainSpec {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for EfTrainSpec {
    fn default() -> Self {
        EfTrainSpec {
            epochs: 10,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Train a fresh regressor with per-epoch shuffled minibatches and MSE loss
/// on `/100`-scaled labels. Returns the model and the per-epoch mean loss
/// trace.
pub fn train_regressor(
    videos: &[Tensor],
    labels: &[f32],
    arch: EfArch,
    spec: &EfTrainSpec,
) -> Result<(EfRegressor, Vec<f32>)> {
    if videos.is_empty() || videos.len() != labels.len() {
        return Err(Error::contract(
            "train_regressor",
            format!("{} videos vs {} labels", videos.len(), labels.len()),
        ));
    }
    if spec.epochs == 0 || spec.batch == 0 {
        return Err(Error::contract("train_regressor", "zero training budget"));
    }
    if labels.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("train_regressor", "non-finite label"));
    }
    let mut model = EfRegressor::new(arch, spec.seed)?;
    let (t, hw) = (arch.frames, arch.image_size);
    let row = t * hw * hw;
    for v in videos {
        if v.shape() != [t, hw, hw] {
            return Err(Error::shape(
                "train_regressor",
                format!("video {:?}, expected [{t},{hw},{hw}]", v.shape()),
            ));
        }
    }
    let mut opt = Adam::new(&model.params, spec.lr);
    let mut trace = Vec::with_capacity(spec.epochs);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    for epoch in 0..spec.epochs {
        let mut r = rng::stream(spec.seed, domains::EF, epoch as u64);
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(spec.batch) {
            let b = chunk.len();
            let mut x = Tensor::zeros([b, t, hw, hw]);
            let mut ys = Vec::with_capacity(b);
            for (i, &vi) in chunk.iter().enumerate() {
                x.data_mut()[i * row..(i + 1) * row].copy_from_slice(videos[vi].data());
                ys.push(labels[vi] / 100.0);
            }
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pred = model.forward_tape(&mut tape, xv, true)?;
            let target = tape.constant(Tensor::new([b, 1], ys)?);
            let loss = tape.mse(pred, target);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    op: "train_regressor",
                    step: epoch,
                    detail: format!("loss {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params, &grads.for_params())?;
            epoch_loss += value as f64;
            batches += 1;
        }
        trace.push((epoch_loss / batches as f64) as f32);
    }
    Ok((model, trace))
}

// ───────────────────────── Fréchet proxy ─────────────────────────

/// Fréchet distance between Gaussian fits of two embedding clouds:
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the usual
/// symmetric-square-root evaluation and trace-scaled shrinkage on both
/// covariances. Each set needs at least `d + 1` samples.
pub fn frechet_embeddings(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("feature_frechet", "empty set"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|e| e.len() != d) {
        return Err(Error::contract("feature_frechet", "ragged embeddings"));
    }
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::contract(
            "feature_frechet",
            format!(
                "need at least d+1 = {} samples per set, got {} and {}",
                d + 1,
                a.len(),
                b.len()
            ),
        ));
    }
    let to64 = |s: &[Vec<f32>]| {
        s.iter()
            .map(|e| e.iter().map(|&v| v as f64).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    };
    let (mu_a, mut cov_a) = mean_covariance(&to64(a))?;
    let (mu_b, mut cov_b) = mean_covariance(&to64(b))?;
    let eps_a = 1e-6 * trace(d, &cov_a) / d as f64;
    let eps_b = 1e-6 * trace(d, &cov_b) / d as f64;
    add_ridge(d, &mut cov_a, eps_a);
    add_ridge(d, &mut cov_b, eps_b);
    let mean_gap: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = sqrtm_psd(d, &cov_a)?;
    let m = matmul_f64(&matmul_f64(&root_a, &cov_b, d, d, d), &root_a, d, d, d);
    let (vals, _) = sym_eigen(d, &m)?;
    let max_val = vals.iter().cloned().fold(0.0f64, f64::max);
    let min_val = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_val < -1e-6 * max_val.max(1.0) {
        return Err(Error::Numeric(format!(
            "cross-covariance product has eigenvalue {min_val:.3e} beyond PSD tolerance"
        )));
    }
    let cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let fd = mean_gap + trace(d, &cov_a) + trace(d, &cov_b) - 2.0 * cross;
    if fd < -1e-4 {
        return Err(Error::Numeric(format!("Fréchet distance {fd:.3e} below zero")));
    }
    Ok(fd.max(0.0))
}

/// Embed two sets of latent images with the re-id encoder and compare their
/// Gaussian fits.
pub fn feature_frechet(a: &[Tensor], b: &[Tensor], enc: &ReIdEncoder) -> Result<f64> {
    let ea = enc.embed_batch(a)?;
    let eb = enc.embed_batch(b)?;
    frechet_embeddings(&ea, &eb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn metrics_hand_examples() {
        let m = metrics(&[0.0, 10.0], &[1.0, 9.0]).unwrap();
        assert!((m.mae - 1.0).abs() < 1e-12);
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!((m.r2 - 0.96).abs() < 1e-12);
        assert_eq!(m.n, 2);

        let y = [3.0, 7.0, 1.0, 9.0];
        let perfect = metrics(&y, &y).unwrap();
        assert_eq!(perfect.r2, 1.0);
        assert_eq!(perfect.mae, 0.0);
        assert_eq!(perfect.rmse, 0.0);

        let mean = y.iter().sum::<f32>() / 4.0;
        let m0 = metrics(&y, &[mean; 4]).unwrap();
        assert!(m0.r2.abs() < 1e-9);

        assert!(matches!(
            metrics(&[5.0, 5.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(metrics(&[1.0], &[1.0]).is_err());
        assert!(metrics(&[1.0, 2.0], &[1.0]).is_err());
        assert!(metrics(&[1.0, f32::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn metrics_consistency_under_noise() {
        let mut r = rng::stream(41, 0, 0);
        let y: Vec<f32> = (0..50).map(|_| r.random_range(10.0f32..90.0)).collect();
        let eps: Vec<f32> = (0..50).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let mut last_r2 = 1.1f64;
        for scale in [0.5f32, 1.0, 2.0, 4.0, 8.0] {
            let yhat: Vec<f32> = y.iter().zip(&eps).map(|(a, e)| a + scale * e).collect();
            let m = metrics(&y, &yhat).unwrap();
            assert!(m.rmse >= m.mae, "rmse {} < mae {}", m.rmse, m.mae);
            assert!(m.r2 <= 1.0);
            assert!(m.r2 < last_r2, "r2 not strictly decreasing at scale {scale}");
            last_r2 = m.r2;
        }
        // evaluating twice yields identical numbers
        let yhat: Vec<f32> = y.iter().map(|a| a + 1.5).collect();
        assert_eq!(metrics(&y, &yhat).unwrap(), metrics(&y, &yhat).unwrap());
    }

    struct StubPredictor(Vec<f32>);

    impl EfPredictor for StubPredictor {
        fn predict_all(&self, _videos: &[Tensor]) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn relabel_clamps_and_respects_perfect_stub() {
        let videos: Vec<Tensor> = (0..3).map(|_| Tensor::zeros([2, 8, 8])).collect();
        let wild = StubPredictor(vec![150.0, -5.0, 42.0]);
        let out = relabel(&videos, &wild).unwrap();
        assert_eq!(out, vec![LABEL_CEIL, 0.0, 42.0]);
        assert!(out.iter().all(|&l| (0.0..100.0).contains(&l)));
        // a perfect predictor leaves labels untouched
        let labels = vec![33.0, 66.0, 12.5];
        let perfect = StubPredictor(labels.clone());
        assert_eq!(relabel(&videos, &perfect).unwrap(), labels);
    }

    fn disc_video(frames: usize, hw: usize, r0: f32, amp: f32, texture: f32, seed: u64) -> Tensor {
        // radius contracts and recovers over one cycle; intensity is smooth
        // so sub-pixel changes register
        let mut rr = rng::stream(seed, 0, 0);
        let noise = Tensor::randn([hw, hw], &mut rr).scale(texture);
        Tensor::from_fn([frames, hw, hw], |idx| {
            let f = idx / (hw * hw);
            let y = (idx / hw) % hw;
            let x = idx % hw;
            let phase = f as f32 / frames as f32;
            let r = r0 - amp * 0.5 * (1.0 - (2.0 * std::f32::consts::PI * phase).cos());
            let c = hw as f32 / 2.0 - 0.5;
            let d = ((y as f32 - c).powi(2) + (x as f32 - c).powi(2)).sqrt();
            let body = 1.0 / (1.0 + ((d - r) * 2.0).exp());
            (body + noise.data()[y * hw + x]).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn relabel_idempotent_with_real_regressor() {
        let videos: Vec<Tensor> = (0..4)
            .map(|i| disc_video(4, 8, 2.5, 0.5 + 0.2 * i as f32, 0.02, i as u64))
            .collect();
        let arch = EfArch {
            frames: 4,
            image_size: 8,
            channels: 4,
        };
        let reg = EfRegressor::new(arch, 9).unwrap();
        let once = relabel(&videos, &reg).unwrap();
        let twice = relabel(&videos, &reg).unwrap();
        assert_eq!(once, twice);
        assert!(once.iter().all(|&l| (0.0..100.0).contains(&l)));
    }

    #[test]
    fn constant_labels_converge_to_constant_predictor() {
        let videos: Vec<Tensor> = (0..8)
            .map(|i| disc_video(4, 8, 2.0 + 0.2 * (i % 4) as f32, 0.6, 0.05, 100 + i as u64))
            .collect();
        let labels = vec![50.0f32; videos.len()];
        let arch = EfArch {
            frames: 4,
            image_size: 8,
            channels: 4,
        };
        let spec = EfTrainSpec {
            epochs: 60,
            batch: 4,
            lr: 5e-3,
            seed: 1,
        };
        let (model, trace) = train_regressor(&videos, &labels, arch, &spec).unwrap();
        assert_eq!(trace.len(), spec.epochs);
        let preds = model.predict_batch(&videos).unwrap();
        let mae: f32 =
            preds.iter().zip(&labels).map(|(p, l)| (p - l).abs()).sum::<f32>() / preds.len() as f32;
        assert!(mae < 3.0, "train MAE {mae} on constant labels");
    }

    #[test]
    fn training_is_deterministic() {
        let videos: Vec<Tensor> = (0..6)
            .map(|i| disc_video(4, 8, 2.5, 0.3 + 0.1 * i as f32, 0.03, 200 + i as u64))
            .collect();
        let labels: Vec<f32> = (0..6).map(|i| 30.0 + 8.0 * i as f32).collect();
        let arch = EfArch {
            frames: 4,
            image_size: 8,
            channels: 4,
        };
        let spec = EfTrainSpec {
            epochs: 5,
            batch: 4,
            lr: 2e-3,
            seed: 7,
        };
        let (m1, t1) = train_regressor(&videos, &labels, arch, &spec).unwrap();
        let (m2, t2) = train_regressor(&videos, &labels, arch, &spec).unwrap();
        assert_eq!(t1, t2);
        for id in m1.params.ids() {
            assert_eq!(m1.params.get(id).data(), m2.params.get(id).data());
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut bad = disc_video(4, 8, 2.5, 0.5, 0.0, 5);
        bad.data_mut()[10] = f32::NAN;
        let videos = vec![bad, disc_video(4, 8, 2.0, 0.4, 0.0, 6)];
        let arch = EfArch {
            frames: 4,
            image_size: 8,
            channels: 4,
        };
        let spec = EfTrainSpec {
            epochs: 3,
            batch: 2,
            lr: 1e-3,
            seed: 2,
        };
        match train_regressor(&videos, &[40.0, 50.0], arch, &spec) {
            Err(Error::Diverged { op, step, .. }) => {
                assert_eq!(op, "train_regressor");
                assert_eq!(step, 0);
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn regressor_learns_contraction_amplitude() {
        // EF-like target: fractional area change of the oscillating disc
        let n = 24;
        let mut videos = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let amp = 0.4 + 1.6 * (i as f32 / (n - 1) as f32);
            let r0 = 5.0;
            videos.push(disc_video(6, 16, r0, amp, 0.02, 300 + i as u64));
            let rs = r0 - amp;
            labels.push(100.0 * (1.0 - (rs * rs) / (r0 * r0)));
        }
        let arch = EfArch {
            frames: 6,
            image_size: 16,
            channels: 6,
        };
        let spec = EfTrainSpec {
            epochs: 80,
            batch: 8,
            lr: 3e-3,
            seed: 3,
        };
        // interleaved split so held-out labels lie inside the train range
        let mut train_v = Vec::new();
        let mut train_l = Vec::new();
        let mut test_v = Vec::new();
        let mut test_l = Vec::new();
        for i in 0..n {
            if i % 4 == 2 {
                test_v.push(videos[i].clone());
                test_l.push(labels[i]);
            } else {
                train_v.push(videos[i].clone());
                train_l.push(labels[i]);
            }
        }
        let (model, _) = train_regressor(&train_v, &train_l, arch, &spec).unwrap();
        let preds = model.predict_batch(&test_v).unwrap();
        let m = metrics(&test_l, &preds).unwrap();
        assert!(m.r2 > 0.5, "held-out R² {}", m.r2);
    }

    #[test]
    fn efreg_checkpoint_roundtrip() {
        let arch = EfArch {
            frames: 4,
            image_size: 8,
            channels: 4,
        };
        let model = EfRegressor::new(arch, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("efreg.ckpt");
        model.save(&path, 31).unwrap();
        let (back, hash) = EfRegressor::load(&path).unwrap();
        assert_eq!(hash, 31);
        let v = disc_video(4, 8, 2.5, 0.5, 0.04, 12);
        assert_eq!(model.predict(&v).unwrap(), back.predict(&v).unwrap());
    }

    #[test]
    fn frechet_identities() {
        let mut r = rng::stream(42, 0, 0);
        let a: Vec<Vec<f32>> = (0..24)
            .map(|_| Tensor::randn([4], &mut r).data().to_vec())
            .collect();
        assert!(frechet_embeddings(&a, &a).unwrap() < 1e-4);
        let b: Vec<Vec<f32>> = a
            .iter()
            .map(|e| e.iter().map(|&v| v + 2.0).collect())
            .collect();
        let ab = frechet_embeddings(&a, &b).unwrap();
        let ba = frechet_embeddings(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-4, "asymmetry {ab} vs {ba}");
        // mean shift by 2 in every coordinate with identical covariances:
        // FD = ||shift||^2 = 4 d
        assert!((ab - 16.0).abs() < 1e-3, "shifted-clone distance {ab}");
    }

    #[test]
    fn frechet_point_masses() {
        let delta = 3.0f32;
        let a: Vec<Vec<f32>> = (0..4).map(|_| vec![0.0, 0.0, 0.0]).collect();
        let b: Vec<Vec<f32>> = (0..4).map(|_| vec![delta, 0.0, 0.0]).collect();
        let fd = frechet_embeddings(&a, &b).unwrap();
        assert!(
            (fd - (delta * delta) as f64).abs() < 1e-9,
            "point-mass distance {fd}"
        );
    }

    #[test]
    fn frechet_preconditions() {
        let a: Vec<Vec<f32>> = (0..3).map(|_| vec![0.0; 4]).collect();
        let b = a.clone();
        // 3 < d + 1 = 5
        assert!(frechet_embeddings(&a, &b).is_err());
        let ragged = vec![vec![0.0; 4], vec![0.0; 3]];
        assert!(frechet_embeddings(&ragged, &b).is_err());
        assert!(frechet_embeddings(&[], &b).is_err());
    }

    #[test]
    fn frechet_half_split_closer_than_shifted() {
        let mut r = rng::stream(43, 0, 0);
        let cloud: Vec<Vec<f32>> = (0..80)
            .map(|_| Tensor::randn([4], &mut r).data().to_vec())
            .collect();
        let (h1, h2) = cloud.split_at(40);
        let shifted: Vec<Vec<f32>> = h2
            .iter()
            .map(|e| e.iter().map(|&v| v + 3.0).collect())
            .collect();
        let near = frechet_embeddings(h1, h2).unwrap();
        let far = frechet_embeddings(h1, &shifted).unwrap();
        assert!(near < far, "half-split {near} not closer than shifted {far}");
    }
}
