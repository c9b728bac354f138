//! Re-identification privacy filter: a contrastive anatomy encoder over
//! latent images, Pearson-correlation similarity against the training set,
//! a percentile-calibrated threshold `tau`, and the accept/reject filter
//! applied to generated candidates.
//!
//! The encoder is trained to tell whether two latent frames come from the
//! same video. At filtering time each candidate is embedded and correlated
//! against one stored embedding per training video (the first frame of each
//! video); a candidate whose best correlation reaches `tau` is rejected as a
//! potential memorization.

use crate::ckpt::{read_file, ByteReader, ByteWriter, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::layers::manifest_of;
use crate::numerics::{Adam, Layer, LayerSpec, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, domains};
use rand::Rng;
use std::path::Path;

/// Embedding width.
pub const REID_DIM: usize = 64;

// ───────────────────────── similarity ─────────────────────────

/// Pearson correlation of two equal-length vectors. Undefined (error) when
/// either vector is constant or shorter than 2.
pub fn pearson(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::contract(
            "pearson",
            format!("lengths {} vs {}", u.len(), v.len()),
        ));
    }
    if u.len() < 2 {
        return Err(Error::contract("pearson", "need at least 2 components"));
    }
    let n = u.len() as f64;
    let mu: f64 = u.iter().map(|&a| a as f64).sum::<f64>() / n;
    let mv: f64 = v.iter().map(|&a| a as f64).sum::<f64>() / n;
    let mut suu = 0.0;
    let mut svv = 0.0;
    let mut suv = 0.0;
    for i in 0..u.len() {
        let du = u[i] as f64 - mu;
        let dv = v[i] as f64 - mv;
        suu += du * du;
        svv += dv * dv;
        suv += du * dv;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant vector has no correlation".into(),
        ));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile_linear(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile", "empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::contract("percentile", format!("p = {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

// ───────────────────────── encoder ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReIdArch {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// First conv width; doubled once downstream.
    pub channels: usize,
    /// Embedding width.
    pub dim: usize,
}

impl Default for ReIdArch {
    fn default() -> Self {
        ReIdArch {
            latent_channels: 2,
            latent_size: 8,
            channels: 12,
            dim: REID_DIM,
        }
    }
}

impl ReIdArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.channels == 0 || self.dim < 2 {
            return Err(Error::Config(format!("degenerate re-id geometry {self:?}")));
        }
        if self.latent_size < 8 || self.latent_size % 8 != 0 {
            return Err(Error::Config(format!(
                "re-id latent size {} must be a positive multiple of 8 (three stride-2 convs)",
                self.latent_size
            )));
        }
        Ok(())
    }
}

/// Contrastive anatomy encoder plus the pair-classification head used only
/// during training.
pub struct ReIdEncoder {
    pub arch: ReIdArch,
    pub params: ParamStore,
    conv1: Layer,
    conv2: Layer,
    conv3: Layer,
    proj: Layer,
    head: Layer,
}

impl ReIdEncoder {
    pub fn new(arch: ReIdArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, domains::INIT, 4);
        let (k, c, d) = (arch.latent_channels, arch.channels, arch.dim);
        let conv1 = Layer::init(LayerSpec::Conv2d { inp: k, out: c, stride: 2 }, &mut params, "conv1", &mut r)?;
        let conv2 = Layer::init(LayerSpec::Conv2d { inp: c, out: 2 * c, stride: 2 }, &mut params, "conv2", &mut r)?;
        let conv3 = Layer::init(LayerSpec::Conv2d { inp: 2 * c, out: 2 * c, stride: 2 }, &mut params, "conv3", &mut r)?;
        let proj = Layer::init(LayerSpec::Affine { inp: 2 * c, out: d }, &mut params, "proj", &mut r)?;
        let head = Layer::init(LayerSpec::Affine { inp: d, out: 1 }, &mut params, "head", &mut r)?;
        Ok(ReIdEncoder {
            arch,
            params,
            conv1,
            conv2,
            conv3,
            proj,
            head,
        })
    }

    pub fn manifest(&self) -> String {
        manifest_of(
            &[&self.conv1, &self.conv2, &self.conv3, &self.proj, &self.head],
            &[format!(
                "reid(k{},s{},d{})",
                self.arch.latent_channels, self.arch.latent_size, self.arch.dim
            )],
        )
    }

    /// Encoder trunk on a tape: `[B,K,h,w]` latents to `[B,d]` embeddings.
    pub fn embed_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (k, ls) = (self.arch.latent_channels, self.arch.latent_size);
        if s.len() != 4 || s[1] != k || s[2] != ls || s[3] != ls {
            return Err(Error::shape(
                "reid_embed",
                format!("input {s:?}, expected [b,{k},{ls},{ls}]"),
            ));
        }
        let p = &self.params;
        let h = self.conv1.forward(tape, p, x, trainable)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h, trainable)?;
        let h = tape.silu(h);
        let h = self.conv3.forward(tape, p, h, trainable)?;
        let h = tape.silu(h);
        let g = tape.spatial_mean(h);
        self.proj.forward(tape, p, g, trainable)
    }

    /// Raw embeddings for a batch of latent images (inference; no sigmoid,
    /// matching the correlation stage which works on raw vectors).
    pub fn embed_batch(&self, xs: &[Tensor]) -> Result<Vec<Vec<f32>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let (k, ls) = (self.arch.latent_channels, self.arch.latent_size);
        let row = k * ls * ls;
        let mut stacked = Tensor::zeros([xs.len(), k, ls, ls]);
        for (i, x) in xs.iter().enumerate() {
            if x.shape() != [k, ls, ls] {
                return Err(Error::shape(
                    "reid_embed",
                    format!("latent {:?}, expected [{k},{ls},{ls}]", x.shape()),
                ));
            }
            stacked.data_mut()[i * row..(i + 1) * row].copy_from_slice(x.data());
        }
        let mut tape = Tape::inference();
        let xv = tape.input(stacked);
        let e = self.embed_tape(&mut tape, xv, false)?;
        let val = tape.value(e);
        Ok(val
            .data()
            .chunks(self.arch.dim)
            .map(|c| c.to_vec())
            .collect())
    }

    pub fn embed(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.embed_batch(std::slice::from_ref(x))?.pop().unwrap())
    }

    /// Pair logit from the training head: `head(|sigmoid(e_a) - sigmoid(e_b)|)`.
    pub fn pair_logit(&self, a: &Tensor, b: &Tensor) -> Result<f32> {
        let mut tape = Tape::inference();
        let (k, ls) = (self.arch.latent_channels, self.arch.latent_size);
        let row = k * ls * ls;
        let mut stacked = Tensor::zeros([2, k, ls, ls]);
        stacked.data_mut()[..row].copy_from_slice(a.data());
        stacked.data_mut()[row..].copy_from_slice(b.data());
        let xv = tape.input(stacked);
        let e = self.embed_tape(&mut tape, xv, false)?;
        let sq = tape.sigmoid(e);
        let ea = tape.embed_rows(sq, &[0]);
        let eb = tape.embed_rows(sq, &[1]);
        let diff = tape.sub(ea, eb);
        let delta = tape.abs(diff);
        let logit = self.head.forward(&mut tape, &self.params, delta, false)?;
        Ok(tape.value(logit).item())
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let mut ck = Checkpoint::new("reid", config_hash, self.manifest());
        ck.push_meta("latent_channels", self.arch.latent_channels as f64);
        ck.push_meta("latent_size", self.arch.latent_size as f64);
        ck.push_meta("channels", self.arch.channels as f64);
        ck.push_meta("dim", self.arch.dim as f64);
        ck.push_store("reid", &self.params);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<(ReIdEncoder, u64)> {
        let ck = Checkpoint::load(path)?;
        let arch = ReIdArch {
            latent_channels: ck.meta_value("latent_channels")? as usize,
            latent_size: ck.meta_value("latent_size")? as usize,
            channels: ck.meta_value("channels")? as usize,
            dim: ck.meta_value("dim")? as usize,
        };
        let mut model = ReIdEncoder::new(arch, 0)?;
        ck.verify("reid", &model.manifest())?;
        ck.restore_store("reid", &mut model.params)?;
        Ok((model, ck.config_hash))
    }
}

// ───────────────────────── training ─────────────────────────

/// One latent video for re-id training/indexing.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    pub id: u64,
    /// `[T,K,h,w]` latent frames (posterior means of the frozen AVAE).
    pub frames: Tensor,
}

impl LatentVideo {
    pub fn frame(&self, t: usize) -> Tensor {
        let s = self.frames.shape();
        let row: usize = s[1..].iter().product();
        Tensor::new(
            s[1..].to_vec(),
            self.frames.data()[t * row..(t + 1) * row].to_vec(),
        )
        .expect("frame slice")
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReIdTrainSpec {
    pub steps: usize,
    /// Pairs per step (each contributes one positive and one negative pair).
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ReIdTrainSpec {
    fn default() -> Self {
        ReIdTrainSpec {
            steps: 400,
            batch: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One optimizer step of the contrastive objective
/// `BCE(head(|s(a1) - s(a2)|), 1) + BCE(head(|s(a1) - s(b)|), 0)` with
/// `s = sigmoid(Enc(.))`, positives drawn from one video and negatives
/// across two distinct videos.
pub fn reid_train_step(
    model: &mut ReIdEncoder,
    opt: &mut Adam,
    videos: &[LatentVideo],
    batch: usize,
    rng: &mut impl Rng,
) -> Result<f32> {
    if videos.len() < 2 {
        return Err(Error::contract(
            "reid_train_step",
            "need at least two videos for negative pairs",
        ));
    }
    if batch == 0 {
        return Err(Error::contract("reid_train_step", "empty batch"));
    }
    let (k, ls) = (model.arch.latent_channels, model.arch.latent_size);
    let row = k * ls * ls;
    // rows [0,b): anchor a1; [b,2b): positive a2; [2b,3b): negative b
    let mut stacked = Tensor::zeros([3 * batch, k, ls, ls]);
    for i in 0..batch {
        let va = rng.random_range(0..videos.len());
        let vb = loop {
            let v = rng.random_range(0..videos.len());
            if v != va {
                break v;
            }
        };
        let a = &videos[va];
        let b = &videos[vb];
        let f1 = a.frame(rng.random_range(0..a.num_frames()));
        let f2 = a.frame(rng.random_range(0..a.num_frames()));
        let fb = b.frame(rng.random_range(0..b.num_frames()));
        stacked.data_mut()[i * row..(i + 1) * row].copy_from_slice(f1.data());
        stacked.data_mut()[(batch + i) * row..(batch + i + 1) * row].copy_from_slice(f2.data());
        stacked.data_mut()[(2 * batch + i) * row..(2 * batch + i + 1) * row].copy_from_slice(fb.data());
    }
    let mut tape = Tape::new();
    let xv = tape.constant(stacked);
    let e = model.embed_tape(&mut tape, xv, true)?;
    let sq = tape.sigmoid(e);
    let idx_a1: Vec<usize> = (0..batch).collect();
    let idx_a2: Vec<usize> = (batch..2 * batch).collect();
    let idx_b: Vec<usize> = (2 * batch..3 * batch).collect();
    let a1 = tape.embed_rows(sq, &idx_a1);
    let a2 = tape.embed_rows(sq, &idx_a2);
    let bb = tape.embed_rows(sq, &idx_b);
    let dp = tape.sub(a1, a2);
    let dp = tape.abs(dp);
    let dn = tape.sub(a1, bb);
    let dn = tape.abs(dn);
    let logit_p = model.head.forward(&mut tape, &model.params, dp, true)?;
    let logit_n = model.head.forward(&mut tape, &model.params, dn, true)?;
    let ones = tape.constant(Tensor::full([batch, 1], 1.0));
    let zeros = tape.constant(Tensor::full([batch, 1], 0.0));
    let bce_p = tape.bce_with_logits(logit_p, ones);
    let bce_n = tape.bce_with_logits(logit_n, zeros);
    let loss = tape.add(bce_p, bce_n);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged {
            op: "reid_train_step",
            step: 0,
            detail: format!("loss {value}"),
        });
    }
    let grads = tape.backward(loss)?;
    opt.step(&mut model.params, &grads.for_params())?;
    Ok(value)
}

pub fn train_reid(
    model: &mut ReIdEncoder,
    videos: &[LatentVideo],
    spec: &ReIdTrainSpec,
) -> Result<Vec<f32>> {
    if spec.steps == 0 {
        return Err(Error::contract("train_reid", "zero training steps"));
    }
    let mut opt = Adam::new(&model.params, spec.lr);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut r = rng::stream(spec.seed, domains::REID, step as u64);
        losses.push(reid_train_step(model, &mut opt, videos, spec.batch, &mut r)?);
    }
    Ok(losses)
}

/// Same/different pair-classification accuracy of the trained head.
pub fn pair_accuracy(
    model: &ReIdEncoder,
    videos: &[LatentVideo],
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if videos.len() < 2 || pairs == 0 {
        return Err(Error::contract("pair_accuracy", "need two videos and at least one pair"));
    }
    let mut r = rng::stream(seed, domains::REID, u64::MAX);
    let mut correct = 0usize;
    for _ in 0..pairs {
        let va = r.random_range(0..videos.len());
        let a = &videos[va];
        let f1 = a.frame(r.random_range(0..a.num_frames()));
        let positive = r.random_range(0.0f32..1.0) < 0.5;
        let other = if positive {
            a.frame(r.random_range(0..a.num_frames()))
        } else {
            let vb = loop {
                let v = r.random_range(0..videos.len());
                if v != va {
                    break v;
                }
            };
            videos[vb].frame(r.random_range(0..videos[vb].num_frames()))
        };
        let logit = model.pair_logit(&f1, &other)?;
        // head says "same video" when the squashed logit crosses 1/2
        let same = logit > 0.0;
        if same == positive {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs as f64)
}

// ───────────────────────── index, threshold, filter ─────────────────────────

/// One raw embedding per video: the first encoded frame.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub ids: Vec<u64>,
    pub embeddings: Vec<Vec<f32>>,
    /// Which split the index was built from (not persisted in the binary
    /// format; carried through the run manifest).
    pub split: String,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embed the first frame of every video.
pub fn build_index(model: &ReIdEncoder, videos: &[LatentVideo], split: &str) -> Result<EmbeddingIndex> {
    let firsts: Vec<Tensor> = videos.iter().map(|v| v.frame(0)).collect();
    let embeddings = model.embed_batch(&firsts)?;
    Ok(EmbeddingIndex {
        dim: model.arch.dim,
        ids: videos.iter().map(|v| v.id).collect(),
        embeddings,
        split: split.to_string(),
    })
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(b"REID");
    w.u32(index.dim as u32);
    w.u32(index.len() as u32);
    for (id, e) in index.ids.iter().zip(&index.embeddings) {
        w.u64(*id);
        for &v in e {
            w.f32(v);
        }
    }
    std::fs::write(path, w.finish()).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path, split: &str) -> Result<EmbeddingIndex> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(b"REID")?;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut ids = Vec::with_capacity(count);
    let mut embeddings = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.u64()?);
        let mut e = Vec::with_capacity(dim);
        for _ in 0..dim {
            e.push(r.f32()?);
        }
        embeddings.push(e);
    }
    r.done()?;
    Ok(EmbeddingIndex {
        dim,
        ids,
        embeddings,
        split: split.to_string(),
    })
}

/// Calibrated privacy threshold with its provenance.
#[derive(Debug, Clone)]
pub struct PrivacyThreshold {
    pub tau: f64,
    pub percentile: f64,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

/// For every training video take its maximum correlation against the
/// validation embeddings, then return the `p`-th percentile of those maxima.
pub fn calibrate_tau(train: &EmbeddingIndex, val: &EmbeddingIndex, p: f64) -> Result<PrivacyThreshold> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("calibrate_tau", "empty index"));
    }
    let mut maxima = Vec::with_capacity(train.len());
    for e_train in &train.embeddings {
        let mut best = f64::NEG_INFINITY;
        for e_val in &val.embeddings {
            best = best.max(pearson(e_train, e_val)?);
        }
        maxima.push(best);
    }
    let tau = percentile_linear(&maxima, p)?;
    debug_assert!((-1.0..=1.0).contains(&tau));
    Ok(PrivacyThreshold {
        tau,
        percentile: p,
        train_ids: train.ids.clone(),
        val_ids: val.ids.clone(),
    })
}

/// One rejected candidate with the evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub candidate: usize,
    pub rho_max: f64,
    pub matched_id: u64,
}

/// Filter outcome over candidate indices; `accepted` and `rejected`
/// partition the input.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub accepted: Vec<usize>,
    pub rejected: Vec<Rejection>,
}

impl FilterOutcome {
    pub fn rejection_rate(&self) -> f64 {
        let total = self.accepted.len() + self.rejected.len();
        if total == 0 {
            0.0
        } else {
            self.rejected.len() as f64 / total as f64
        }
    }
}

/// Decision core on raw embeddings: reject a candidate iff its maximum
/// correlation over the index reaches `tau`.
pub fn filter_embeddings(
    candidates: &[Vec<f32>],
    index: &EmbeddingIndex,
    tau: f64,
) -> Result<FilterOutcome> {
    if index.is_empty() {
        return Err(Error::contract("filter", "empty index"));
    }
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (ci, cand) in candidates.iter().enumerate() {
        let mut rho_max = f64::NEG_INFINITY;
        let mut matched = index.ids[0];
        for (vi, e) in index.embeddings.iter().enumerate() {
            let rho = pearson(cand, e)?;
            if rho > rho_max {
                rho_max = rho;
                matched = index.ids[vi];
            }
        }
        if rho_max >= tau {
            rejected.push(Rejection {
                candidate: ci,
                rho_max,
                matched_id: matched,
            });
        } else {
            accepted.push(ci);
        }
    }
    Ok(FilterOutcome { accepted, rejected })
}

/// Embed latent candidates and apply the privacy decision.
pub fn filter(
    model: &ReIdEncoder,
    candidates: &[Tensor],
    index: &EmbeddingIndex,
    threshold: &PrivacyThreshold,
) -> Result<FilterOutcome> {
    let embeddings = model.embed_batch(candidates)?;
    filter_embeddings(&embeddings, index, threshold.tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_identities() {
        let u = vec![1.0, 2.0, 4.0, -1.0];
        assert!((pearson(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = u.iter().map(|&a| -a).collect();
        assert!((pearson(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        let aff: Vec<f32> = u.iter().map(|&a| 3.0 * a + 7.0).collect();
        assert!((pearson(&u, &aff).unwrap() - 1.0).abs() < 1e-9);
        let konst = vec![2.0; 4];
        assert!(matches!(
            pearson(&u, &konst),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&u[..2], &u[..3]).is_err());
        assert!(pearson(&u[..1], &neg[..1]).is_err());
    }

    #[test]
    fn percentile_examples() {
        let maxima = [0.1, 0.2, 0.3, 0.4];
        assert!((percentile_linear(&maxima, 50.0).unwrap() - 0.25).abs() < 1e-12);
        assert!((percentile_linear(&maxima, 100.0).unwrap() - 0.4).abs() < 1e-12);
        assert!((percentile_linear(&maxima, 0.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(percentile_linear(&maxima, -1.0).is_err());
        assert!(percentile_linear(&maxima, 100.5).is_err());
        // brute-force oracle on a random sample: p-th percentile sits between
        // the two adjacent order statistics
        let vals = [0.9, -0.3, 0.05, 0.4, -0.8, 0.2, 0.7];
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for p in [10.0, 33.0, 66.0, 95.0] {
            let t = percentile_linear(&vals, p).unwrap();
            let rank = p / 100.0 * (sorted.len() - 1) as f64;
            let lo = sorted[rank.floor() as usize];
            let hi = sorted[rank.ceil() as usize];
            assert!(t >= lo - 1e-12 && t <= hi + 1e-12, "p={p}: {t} not in [{lo},{hi}]");
        }
    }

    #[test]
    fn tau_monotone_in_percentile() {
        let train = EmbeddingIndex {
            dim: 3,
            ids: vec![1, 2, 3, 4],
            embeddings: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.3],
                vec![0.3, 0.3, 1.0],
                vec![1.0, 1.0, 0.0],
            ],
            split: "train".into(),
        };
        let val = EmbeddingIndex {
            dim: 3,
            ids: vec![10, 11],
            embeddings: vec![vec![0.9, 0.1, 0.0], vec![0.1, 0.8, 0.4]],
            split: "val".into(),
        };
        let mut last = f64::NEG_INFINITY;
        for p in [0.0, 25.0, 50.0, 75.0, 95.0, 100.0] {
            let th = calibrate_tau(&train, &val, p).unwrap();
            assert!(th.tau >= last, "tau decreased at p={p}");
            assert!((-1.0..=1.0).contains(&th.tau));
            assert_eq!(th.percentile, p);
            last = th.tau;
        }
    }

    #[test]
    fn calibrate_matches_brute_force() {
        let train = EmbeddingIndex {
            dim: 4,
            ids: vec![1, 2],
            embeddings: vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]],
            split: "train".into(),
        };
        let val = EmbeddingIndex {
            dim: 4,
            ids: vec![9],
            embeddings: vec![vec![1.0, 2.5, 2.5, 4.5]],
            split: "val".into(),
        };
        // oracle: every pairwise correlation by hand
        let mut maxima = Vec::new();
        for e in &train.embeddings {
            let rho = pearson(e, &val.embeddings[0]).unwrap();
            maxima.push(rho);
        }
        let expect = percentile_linear(&maxima, 100.0).unwrap();
        let th = calibrate_tau(&train, &val, 100.0).unwrap();
        assert!((th.tau - expect).abs() < 1e-12);
        assert_eq!(th.train_ids, vec![1, 2]);
        assert_eq!(th.val_ids, vec![9]);
    }

    #[test]
    fn degenerate_embeddings_surface_undefined_correlation() {
        let idx = EmbeddingIndex {
            dim: 3,
            ids: vec![1],
            embeddings: vec![vec![0.5, 0.5, 0.5]],
            split: "train".into(),
        };
        let val = EmbeddingIndex {
            dim: 3,
            ids: vec![2],
            embeddings: vec![vec![0.5, 0.5, 0.5]],
            split: "val".into(),
        };
        assert!(matches!(
            calibrate_tau(&idx, &val, 95.0),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn filter_partition_and_memorization() {
        let index = EmbeddingIndex {
            dim: 4,
            ids: vec![100, 200],
            embeddings: vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 2.0, 1.0]],
            split: "train".into(),
        };
        let candidates = vec![
            vec![1.0, 2.0, 3.0, 4.0],   // exact copy of video 100 -> rho = 1
            vec![4.0, 1.0, -2.0, 0.5],
            vec![-2.0, 0.0, 4.0, 2.0],  // affine of video 200 -> rho = 1
            vec![0.3, -0.4, 0.1, 0.2],
        ];
        let out = filter_embeddings(&candidates, &index, 0.999).unwrap();
        let rejected_ids: Vec<usize> = out.rejected.iter().map(|r| r.candidate).collect();
        assert!(rejected_ids.contains(&0) && rejected_ids.contains(&2));
        assert_eq!(out.accepted.len() + out.rejected.len(), candidates.len());
        let memo = out.rejected.iter().find(|r| r.candidate == 0).unwrap();
        assert!((memo.rho_max - 1.0).abs() < 1e-9);
        assert_eq!(memo.matched_id, 100);
        // no index entry correlates at exactly 1 + eps: sentinel accepts all
        let all = filter_embeddings(&candidates, &index, 1.0 + 1e-9).unwrap();
        assert!(all.rejected.is_empty());
        assert_eq!(all.accepted, vec![0, 1, 2, 3]);
        // brute-force oracle: recompute every decision directly
        for (ci, cand) in candidates.iter().enumerate() {
            let rho_max = index
                .embeddings
                .iter()
                .map(|e| pearson(cand, e).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let rejected = rho_max >= 0.999;
            assert_eq!(rejected, rejected_ids.contains(&ci), "candidate {ci}");
        }
        assert!(filter_embeddings(&candidates, &EmbeddingIndex {
            dim: 4,
            ids: vec![],
            embeddings: vec![],
            split: "train".into(),
        }, 0.5).is_err());
    }

    #[test]
    fn decisions_invariant_under_affine_embedding_transform() {
        let mut r = rng::stream(21, 0, 0);
        let index = EmbeddingIndex {
            dim: 6,
            ids: (0..5).collect(),
            embeddings: (0..5)
                .map(|_| Tensor::randn([6], &mut r).data().to_vec())
                .collect(),
            split: "train".into(),
        };
        let candidates: Vec<Vec<f32>> = (0..8)
            .map(|_| Tensor::randn([6], &mut r).data().to_vec())
            .collect();
        let base = filter_embeddings(&candidates, &index, 0.6).unwrap();
        let xform = |v: &Vec<f32>| v.iter().map(|&a| 2.5 * a + 0.7).collect::<Vec<f32>>();
        let index2 = EmbeddingIndex {
            embeddings: index.embeddings.iter().map(xform).collect(),
            ..index.clone()
        };
        let cands2: Vec<Vec<f32>> = candidates.iter().map(xform).collect();
        let moved = filter_embeddings(&cands2, &index2, 0.6).unwrap();
        assert_eq!(base.accepted, moved.accepted);
        assert_eq!(
            base.rejected.iter().map(|r| r.candidate).collect::<Vec<_>>(),
            moved.rejected.iter().map(|r| r.candidate).collect::<Vec<_>>()
        );
    }

    #[test]
    fn index_roundtrip_and_format_checks() {
        let index = EmbeddingIndex {
            dim: 3,
            ids: vec![7, 8],
            embeddings: vec![vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5]],
            split: "train".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.reid");
        save_index(&index, &path).unwrap();
        let back = load_index(&path, "train").unwrap();
        assert_eq!(back.ids, index.ids);
        assert_eq!(back.embeddings, index.embeddings);
        assert_eq!(back.dim, 3);
        // trailing garbage is a format error
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_index(&path, "train"), Err(Error::Format { .. })));
    }

    /// Synthetic latent store mimicking what real latents carry per video: a
    /// smooth geometry blob (anatomy-like) plus a low-frequency texture
    /// fingerprint, with fresh per-frame noise.
    fn toy_store(n_videos: usize, frames: usize, noise: f32, seed: u64) -> Vec<LatentVideo> {
        let mut r = rng::stream(seed, 0, 0);
        (0..n_videos)
            .map(|i| {
                let coarse = Tensor::randn([2, 3, 3], &mut r);
                let cy = r.random_range(2.5f32..4.5);
                let cx = r.random_range(2.5f32..4.5);
                let rad = r.random_range(1.5f32..3.0);
                let amp = [r.random_range(0.5f32..1.5), r.random_range(0.5f32..1.5)];
                let print = Tensor::from_fn([2, 8, 8], |idx| {
                    let (c, y, x) = (idx / 64, (idx / 8) % 8, idx % 8);
                    let u = y as f32 * 2.0 / 7.0;
                    let v = x as f32 * 2.0 / 7.0;
                    let (i0, j0) = (u.floor() as usize, v.floor() as usize);
                    let (i1, j1) = ((i0 + 1).min(2), (j0 + 1).min(2));
                    let (fu, fv) = (u - i0 as f32, v - j0 as f32);
                    let g = |ii: usize, jj: usize| coarse.data()[c * 9 + ii * 3 + jj];
                    let tex = (1.0 - fu) * ((1.0 - fv) * g(i0, j0) + fv * g(i0, j1))
                        + fu * ((1.0 - fv) * g(i1, j0) + fv * g(i1, j1));
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    amp[c] * (-d2 / (rad * rad)).exp() + 0.6 * tex
                });
                let mut data = Vec::with_capacity(frames * 2 * 8 * 8);
                for _ in 0..frames {
                    let frame = print.zip(&Tensor::randn([2, 8, 8], &mut r), |p, n| p + noise * n);
                    data.extend_from_slice(frame.data());
                }
                LatentVideo {
                    id: 1000 + i as u64,
                    frames: Tensor::new([frames, 2, 8, 8], data).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn single_video_store_is_rejected() {
        let store = toy_store(1, 3, 0.1, 31);
        let mut model = ReIdEncoder::new(ReIdArch::default(), 1).unwrap();
        let mut opt = Adam::new(&model.params, 1e-3);
        let mut r = rng::stream(1, 0, 0);
        assert!(reid_train_step(&mut model, &mut opt, &store, 4, &mut r).is_err());
    }

    #[test]
    fn zero_head_gives_two_ln_two_and_identical_positive_pair() {
        // zero the head -> all logits 0 -> loss = 2 ln 2 regardless of pairs
        let mut model = ReIdEncoder::new(ReIdArch::default(), 2).unwrap();
        for &id in &model.head.params.clone() {
            let z = Tensor::zeros(model.params.get(id).shape().to_vec());
            *model.params.get_mut(id) = z;
        }
        let store = toy_store(3, 1, 0.0, 32); // single frame: positive pairs identical
        let mut opt = Adam::new(&model.params, 0.0); // lr 0: inspect the loss only
        let mut r = rng::stream(2, 0, 0);
        let loss = reid_train_step(&mut model, &mut opt, &store, 6, &mut r).unwrap();
        assert!(
            (loss - 2.0 * std::f32::consts::LN_2) < 1e-4 && loss > 0.0,
            "loss {loss}"
        );
        // identical frames: pair logit equals the head bias (delta = 0)
        let f = store[0].frame(0);
        let logit = model.pair_logit(&f, &f).unwrap();
        assert_eq!(logit, 0.0);
    }

    #[test]
    fn separable_embeddings_fit_toward_bce_optimum() {
        // stub one-hot embeddings per video; fit only a logistic head on the
        // squashed absolute differences. Separable data drives the loss
        // toward the 2-term BCE optimum at 0.
        let n = 4;
        let d = 4;
        let mut store = ParamStore::new();
        let mut r = rng::stream(33, 0, 0);
        let head = Layer::init(LayerSpec::Affine { inp: d, out: 1 }, &mut store, "head", &mut r).unwrap();
        let mut onehot = Tensor::zeros([n, d]);
        for i in 0..n {
            onehot.data_mut()[i * d + i] = 1.0;
        }
        let mut opt = Adam::new(&store, 0.05);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..1200 {
            let mut tape = Tape::new();
            let table = tape.constant(onehot.clone());
            let sq = tape.sigmoid(table);
            // positives: (v, v); negatives: (v, v+1 mod n)
            let idx: Vec<usize> = (0..n).collect();
            let idx_next: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            let a = tape.embed_rows(sq, &idx);
            let b = tape.embed_rows(sq, &idx);
            let c = tape.embed_rows(sq, &idx_next);
            let dpos = tape.sub(a, b);
            let dpos = tape.abs(dpos);
            let dneg = tape.sub(a, c);
            let dneg = tape.abs(dneg);
            let lp = head.forward(&mut tape, &store, dpos, true).unwrap();
            let ln_ = head.forward(&mut tape, &store, dneg, true).unwrap();
            let ones = tape.constant(Tensor::full([n, 1], 1.0));
            let zeros = tape.constant(Tensor::full([n, 1], 0.0));
            let bp = tape.bce_with_logits(lp, ones);
            let bn = tape.bce_with_logits(ln_, zeros);
            let loss = tape.add(bp, bn);
            last = tape.value(loss).item();
            first.get_or_insert(last);
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut store, &grads.for_params()).unwrap();
        }
        assert!(last < 0.2, "loss stuck at {last} from {:?}", first);
        assert!(last < first.unwrap());
    }

    #[test]
    fn training_reaches_high_pair_accuracy() {
        let store = toy_store(48, 4, 0.15, 34);
        let mut model = ReIdEncoder::new(ReIdArch::default(), 3).unwrap();
        let spec = ReIdTrainSpec {
            steps: 800,
            batch: 8,
            lr: 2e-3,
            seed: 5,
        };
        let losses = train_reid(&mut model, &store, &spec).unwrap();
        assert!(losses.iter().all(|l| *l >= 0.0));
        let train_acc = pair_accuracy(&model, &store, 200, 8).unwrap();
        let held_out = toy_store(12, 4, 0.15, 99);
        let acc = pair_accuracy(&model, &held_out, 200, 7).unwrap();
        // held-out videos use fresh fingerprints; the pair task transfers
        assert!(acc >= 0.9, "pair accuracy {acc} held-out, {train_acc} on train");
    }

    #[test]
    fn index_has_one_entry_per_video_from_first_frame() {
        let store = toy_store(5, 3, 0.2, 35);
        let model = ReIdEncoder::new(ReIdArch::default(), 4).unwrap();
        let index = build_index(&model, &store, "train").unwrap();
        assert_eq!(index.len(), 5);
        assert_eq!(index.ids, vec![1000, 1001, 1002, 1003, 1004]);
        let direct = model.embed(&store[2].frame(0)).unwrap();
        let stored = &index.embeddings[2];
        for (a, b) in direct.iter().zip(stored) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reid_checkpoint_roundtrip() {
        let store = toy_store(4, 2, 0.1, 36);
        let mut model = ReIdEncoder::new(ReIdArch::default(), 5).unwrap();
        let spec = ReIdTrainSpec {
            steps: 10,
            batch: 4,
            lr: 1e-3,
            seed: 6,
        };
        train_reid(&mut model, &store, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reid.ckpt");
        model.save(&path, 77).unwrap();
        let (back, hash) = ReIdEncoder::load(&path).unwrap();
        assert_eq!(hash, 77);
        let f = store[1].frame(1);
        assert_eq!(model.embed(&f).unwrap(), back.embed(&f).unwrap());
    }
}
