//! Latent flow matching: training losses, classifier-free guidance, and the
//! Euler ODE sampler, for both single latent images and latent clips.
//!
//! The generative recipe is the straight-path version of flow matching: draw
//! data `x0` and noise `x1`, put the model at `x_t = (1-t) x0 + t x1`, and
//! regress its output onto the constant path velocity `u = x1 - x0`.
//! Sampling integrates the learned field from `t = 1` (noise) down to
//! `t = 0` (data) with plain Euler steps.
//!
//! Conditioning is optional per field and per sample ([`Cond`]); training
//! drops conditions at random so the model also learns the partially- and
//! fully-unconditional branches that classifier-free guidance mixes at
//! sampling time:
//!
//! ```text
//! v = v_neg + lambda_cfg * (v_cond - v_neg)
//! ```
//!
//! so `lambda_cfg = 0` samples the negative branch and `lambda_cfg = 1`
//! ignores guidance entirely.

use crate::avae::LatentStats;
use crate::ckpt::Checkpoint;
use crate::echodata::NUM_VIEWS;
use crate::error::{Error, Result};
use crate::numerics::layers::manifest_of;
use crate::numerics::{Adam, Layer, LayerSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, domains};
use rand::Rng;
use std::path::Path;

// ───────────────────────── conditioning ─────────────────────────

/// Optional conditioning fields; `None` means "not provided", which is its
/// own learned state (null embedding) rather than a zero.
#[derive(Debug, Clone, Default)]
pub struct Cond {
    /// View class, image variant.
    pub view: Option<u32>,
    /// Ventricle mask at latent resolution `[h,w]`, image variant.
    pub mask: Option<Tensor>,
    /// Anatomy latent `[K,h,w]` in normalized space, video variant.
    pub anatomy: Option<Tensor>,
    /// Ejection fraction in percent, video variant.
    pub ef: Option<f32>,
}

impl Cond {
    pub fn none() -> Self {
        Cond::default()
    }

    pub fn for_image(view: u32, mask: Tensor) -> Self {
        Cond {
            view: Some(view),
            mask: Some(mask),
            ..Cond::default()
        }
    }

    pub fn for_video(anatomy: Tensor, ef: f32) -> Self {
        Cond {
            anatomy: Some(anatomy),
            ef: Some(ef),
            ..Cond::default()
        }
    }
}

/// Which conditions the negative (guidance) branch keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegSelector {
    /// Fully unconditional negative branch.
    None,
    AnatomyOnly,
    EfOnly,
    MaskOnly,
    ViewOnly,
}

impl NegSelector {
    pub fn apply(&self, c: &Cond) -> Cond {
        let mut out = Cond::none();
        match self {
            NegSelector::None => {}
            NegSelector::AnatomyOnly => out.anatomy = c.anatomy.clone(),
            NegSelector::EfOnly => out.ef = c.ef,
            NegSelector::MaskOnly => out.mask = c.mask.clone(),
            NegSelector::ViewOnly => out.view = c.view,
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NegSelector::None),
            "anatomy-only" => Ok(NegSelector::AnatomyOnly),
            "ef-only" => Ok(NegSelector::EfOnly),
            "mask-only" => Ok(NegSelector::MaskOnly),
            "view-only" => Ok(NegSelector::ViewOnly),
            other => Err(Error::Config(format!(
                "unknown negative selector `{other}` (expected none|anatomy-only|ef-only|mask-only|view-only)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NegSelector::None => "none",
            NegSelector::AnatomyOnly => "anatomy-only",
            NegSelector::EfOnly => "ef-only",
            NegSelector::MaskOnly => "mask-only",
            NegSelector::ViewOnly => "view-only",
        }
    }
}

/// Sampler settings.
#[derive(Debug, Clone, Copy)]
pub struct SamplerSpec {
    /// Euler step count `N >= 1`.
    pub steps: usize,
    pub lambda_cfg: f32,
    pub negative: NegSelector,
    /// Seeds the initial noise draw.
    pub seed: u64,
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !self.lambda_cfg.is_finite() || self.lambda_cfg < 0.0 {
            return Err(Error::Config(format!(
                "lambda_cfg {} must be finite and non-negative",
                self.lambda_cfg
            )));
        }
        Ok(())
    }
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            steps: 100,
            lambda_cfg: 2.0,
            negative: NegSelector::None,
            seed: 0,
        }
    }
}

// ───────────────────────── path primitives ─────────────────────────

/// Linear interpolant `x_t = (1-t) x0 + t x1`. `t` must lie in `[0, 1]`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract("interpolate", format!("t = {t} outside [0, 1]")));
    }
    Ok(x0.zip(x1, |a, b| (1.0 - t) * a + t * b))
}

/// Constant path velocity `u = x1 - x0`.
pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(
            "velocity_target",
            format!("{:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    Ok(x1.zip(x0, |b, a| b - a))
}

/// Flow-matching loss on a tape, generic over the velocity network:
/// per-sample squared error summed over dimensions, averaged over the batch.
/// `velocity` receives the interpolated batch and per-sample times and must
/// return a tensor shaped like `x0`.
pub fn fm_loss_on_tape(
    tape: &mut Tape,
    x0: &Tensor,
    x1: &Tensor,
    ts: &[f32],
    velocity: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let batch = x0.shape()[0];
    if ts.len() != batch {
        return Err(Error::contract(
            "fm_loss",
            format!("{} time draws for batch {batch}", ts.len()),
        ));
    }
    if x0.shape() != x1.shape() {
        return Err(Error::shape("fm_loss", format!("{:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let row: usize = x0.shape()[1..].iter().product();
    let mut xt = x0.clone();
    let mut u = x1.clone();
    for (i, &t) in ts.iter().enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract("fm_loss", format!("t = {t} outside [0, 1]")));
        }
        for j in i * row..(i + 1) * row {
            let (a, b) = (x0.data()[j], x1.data()[j]);
            xt.data_mut()[j] = (1.0 - t) * a + t * b;
            u.data_mut()[j] = b - a;
        }
    }
    let xt = tape.constant(xt);
    let tv = tape.constant(Tensor::new([batch], ts.to_vec())?);
    let v = velocity(tape, xt, tv)?;
    let target = tape.constant(u);
    let diff = tape.sub(v, target);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 1.0 / batch as f32);
    if !tape.value(loss).item().is_finite() {
        return Err(Error::Diverged {
            op: "fm_loss",
            step: 0,
            detail: format!("loss = {}", tape.value(loss).item()),
        });
    }
    Ok(loss)
}

/// Value-level flow-matching loss for any velocity field (used with stubs
/// and oracles in tests; no gradients).
pub fn fm_loss_field(
    field: &dyn VelocityField,
    x0s: &[Tensor],
    x1s: &[Tensor],
    ts: &[f32],
    conds: &[Cond],
) -> Result<f64> {
    if x0s.len() != x1s.len() || x0s.len() != ts.len() || x0s.len() != conds.len() {
        return Err(Error::contract("fm_loss", "batch components disagree in length"));
    }
    if x0s.is_empty() {
        return Err(Error::contract("fm_loss", "empty batch"));
    }
    let mut acc = 0.0f64;
    for i in 0..x0s.len() {
        let xt = interpolate(&x0s[i], &x1s[i], ts[i])?;
        let u = velocity_target(&x0s[i], &x1s[i])?;
        let v = field.velocity(&xt, ts[i], &conds[i])?;
        if v.shape() != u.shape() {
            return Err(Error::shape(
                "fm_loss",
                format!("velocity {:?} vs target {:?}", v.shape(), u.shape()),
            ));
        }
        for (a, b) in v.data().iter().zip(u.data()) {
            acc += ((a - b) as f64).powi(2);
        }
    }
    let loss = acc / x0s.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            op: "fm_loss",
            step: 0,
            detail: format!("loss = {loss}"),
        });
    }
    Ok(loss)
}

// ───────────────────────── condition dropout ─────────────────────────

/// Dropout decision for one sample: which fields to hide from the model.
#[derive(Debug, Clone, Copy, Default)]
pub struct CondDrop {
    pub view: bool,
    pub mask: bool,
    pub anatomy: bool,
    pub ef: bool,
}

impl CondDrop {
    pub fn apply(&self, c: &Cond) -> Cond {
        Cond {
            view: if self.view { None } else { c.view },
            mask: if self.mask { None } else { c.mask.clone() },
            anatomy: if self.anatomy { None } else { c.anatomy.clone() },
            ef: if self.ef { None } else { c.ef },
        }
    }
}

/// Draw a dropout decision: each field independently with `p_each`, plus an
/// additional all-fields drop with `p_all`, so every negative-selector
/// branch used at sampling time is visited during training.
pub fn sample_cond_drop(rng: &mut impl Rng, p_each: f32, p_all: f32) -> CondDrop {
    if rng.random_range(0.0f32..1.0) < p_all {
        return CondDrop {
            view: true,
            mask: true,
            anatomy: true,
            ef: true,
        };
    }
    CondDrop {
        view: rng.random_range(0.0f32..1.0) < p_each,
        mask: rng.random_range(0.0f32..1.0) < p_each,
        anatomy: rng.random_range(0.0f32..1.0) < p_each,
        ef: rng.random_range(0.0f32..1.0) < p_each,
    }
}

// ───────────────────────── velocity fields ─────────────────────────

/// Anything that can evaluate `v(x, t, cond)` on single samples. The trait
/// exists so the sampler and guidance are testable against closed-form stub
/// fields.
pub trait VelocityField {
    /// Shape of one sample (`[K,h,w]` for images, `[T,K,h,w]` for clips).
    fn sample_shape(&self) -> Vec<usize>;
    fn velocity(&self, x: &Tensor, t: f32, cond: &Cond) -> Result<Tensor>;
}

/// Guided velocity: evaluate the conditional and negative branches and mix
/// with `v_neg + lambda (v_cond - v_neg)`. The endpoints short-circuit: at
/// `lambda = 0` only the negative branch runs, at `lambda = 1` only the
/// conditional one.
pub fn cfg_velocity(
    field: &dyn VelocityField,
    x: &Tensor,
    t: f32,
    cond: &Cond,
    lambda_cfg: f32,
    negative: NegSelector,
) -> Result<Tensor> {
    if lambda_cfg == 1.0 {
        return field.velocity(x, t, cond);
    }
    let neg_cond = negative.apply(cond);
    if lambda_cfg == 0.0 {
        return field.velocity(x, t, &neg_cond);
    }
    let v_cond = field.velocity(x, t, cond)?;
    let v_neg = field.velocity(x, t, &neg_cond)?;
    Ok(v_neg.zip(&v_cond, |n, c| n + lambda_cfg * (c - n)))
}

/// Integrate from noise (`t = 1`) to data (`t = 0`) with `spec.steps` Euler
/// steps: `x <- x - dt * v(x, t)`. The initial noise is standard normal from
/// `spec.seed`.
pub fn sample_euler(field: &dyn VelocityField, spec: &SamplerSpec, cond: &Cond) -> Result<Tensor> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, domains::SAMPLER, 0);
    let mut x = Tensor::randn(field.sample_shape(), &mut r);
    let dt = 1.0 / spec.steps as f32;
    for i in 0..spec.steps {
        let t = 1.0 - i as f32 * dt;
        let v = cfg_velocity(field, &x, t, cond, spec.lambda_cfg, spec.negative)?;
        x.add_scaled(&v, -dt);
        if !x.all_finite() {
            return Err(Error::Diverged {
                op: "sample_euler",
                step: i,
                detail: "non-finite state".into(),
            });
        }
    }
    Ok(x)
}

// ───────────────────────── the flow models ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowVariant {
    Image,
    Video,
}

impl FlowVariant {
    fn as_str(&self) -> &'static str {
        match self {
            FlowVariant::Image => "image",
            FlowVariant::Video => "video",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowArch {
    pub variant: FlowVariant,
    /// Latent channels K.
    pub latent_channels: usize,
    /// Latent spatial side h (= w).
    pub latent_size: usize,
    /// Clip length; 1 for the image variant.
    pub frames: usize,
    /// Hidden width.
    pub channels: usize,
}

impl FlowArch {
    pub fn image(latent_channels: usize, latent_size: usize, channels: usize) -> Self {
        FlowArch {
            variant: FlowVariant::Image,
            latent_channels,
            latent_size,
            frames: 1,
            channels,
        }
    }

    pub fn video(latent_channels: usize, latent_size: usize, frames: usize, channels: usize) -> Self {
        FlowArch {
            variant: FlowVariant::Video,
            latent_channels,
            latent_size,
            frames,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.latent_size == 0 || self.channels < 4 {
            return Err(Error::Config(format!("degenerate flow geometry {self:?}")));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "flow hidden width {} must be divisible by 4 (group norm)",
                self.channels
            )));
        }
        match self.variant {
            FlowVariant::Image if self.frames != 1 => {
                Err(Error::Config("image flow must have frames = 1".into()))
            }
            FlowVariant::Video if self.frames < 2 => {
                Err(Error::Config("video flow needs at least 2 frames".into()))
            }
            _ => Ok(()),
        }
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.variant {
            FlowVariant::Image => vec![self.latent_channels, self.latent_size, self.latent_size],
            FlowVariant::Video => vec![
                self.frames,
                self.latent_channels,
                self.latent_size,
                self.latent_size,
            ],
        }
    }
}

const TIME_DIM: usize = 32;

/// Conditional velocity network. One struct covers both variants; the video
/// variant adds an anatomy branch, an EF branch, and temporal mixing layers.
pub struct FlowModel {
    pub arch: FlowArch,
    pub params: ParamStore,
    conv_in: Layer,
    t_proj: Layer,
    block1_norm: Layer,
    block1_conv: Layer,
    block2_norm: Layer,
    block2_conv: Layer,
    out_norm: Layer,
    out_conv: Layer,
    // image-variant conditioning
    mask_conv: Option<Layer>,
    null_mask: Option<ParamId>,
    view_table: Option<ParamId>,
    null_view: Option<ParamId>,
    // video-variant conditioning
    anat_conv: Option<Layer>,
    null_anatomy: Option<ParamId>,
    ef_proj: Option<Layer>,
    null_ef: Option<ParamId>,
    mix1: Option<Layer>,
    mix2: Option<Layer>,
}

impl FlowModel {
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, domains::INIT, 3);
        let (k, ch, ls) = (arch.latent_channels, arch.channels, arch.latent_size);
        let conv_in = Layer::init(LayerSpec::Conv2d { inp: k, out: ch, stride: 1 }, &mut params, "conv_in", &mut r)?;
        let t_proj = Layer::init(LayerSpec::Affine { inp: TIME_DIM, out: ch }, &mut params, "t_proj", &mut r)?;
        let block1_norm = Layer::init(LayerSpec::GroupNorm { channels: ch, groups: 4 }, &mut params, "b1_norm", &mut r)?;
        let block1_conv = Layer::init(LayerSpec::Conv2d { inp: ch, out: ch, stride: 1 }, &mut params, "b1_conv", &mut r)?;
        let block2_norm = Layer::init(LayerSpec::GroupNorm { channels: ch, groups: 4 }, &mut params, "b2_norm", &mut r)?;
        let block2_conv = Layer::init(LayerSpec::Conv2d { inp: ch, out: ch, stride: 1 }, &mut params, "b2_conv", &mut r)?;
        let out_norm = Layer::init(LayerSpec::GroupNorm { channels: ch, groups: 4 }, &mut params, "out_norm", &mut r)?;
        let out_conv = Layer::init(LayerSpec::Conv2d { inp: ch, out: k, stride: 1 }, &mut params, "out_conv", &mut r)?;
        // zero-init the output projection so the field starts at v = 0
        for &id in &out_conv.params {
            let z = Tensor::zeros(params.get(id).shape().to_vec());
            *params.get_mut(id) = z;
        }

        let mut model = FlowModel {
            arch,
            params: ParamStore::new(), // replaced below
            conv_in,
            t_proj,
            block1_norm,
            block1_conv,
            block2_norm,
            block2_conv,
            out_norm,
            out_conv,
            mask_conv: None,
            null_mask: None,
            view_table: None,
            null_view: None,
            anat_conv: None,
            null_anatomy: None,
            ef_proj: None,
            null_ef: None,
            mix1: None,
            mix2: None,
        };
        match arch.variant {
            FlowVariant::Image => {
                model.mask_conv = Some(Layer::init(
                    LayerSpec::Conv2d { inp: 1, out: ch, stride: 1 },
                    &mut params,
                    "mask_conv",
                    &mut r,
                )?);
                model.null_mask =
                    Some(params.register("null_mask", Tensor::randn([1, ls, ls], &mut r).scale(0.1)));
                model.view_table = Some(params.register(
                    "view_table",
                    Tensor::randn([NUM_VIEWS as usize, ch], &mut r).scale(0.1),
                ));
                model.null_view = Some(params.register("null_view", Tensor::randn([ch], &mut r).scale(0.1)));
            }
            FlowVariant::Video => {
                model.anat_conv = Some(Layer::init(
                    LayerSpec::Conv2d { inp: k, out: ch, stride: 1 },
                    &mut params,
                    "anat_conv",
                    &mut r,
                )?);
                model.null_anatomy =
                    Some(params.register("null_anatomy", Tensor::randn([k, ls, ls], &mut r).scale(0.1)));
                model.ef_proj = Some(Layer::init(
                    LayerSpec::Affine { inp: TIME_DIM, out: ch },
                    &mut params,
                    "ef_proj",
                    &mut r,
                )?);
                model.null_ef = Some(params.register("null_ef", Tensor::randn([ch], &mut r).scale(0.1)));
                model.mix1 = Some(Layer::init(
                    LayerSpec::TemporalMix { frames: arch.frames },
                    &mut params,
                    "mix1",
                    &mut r,
                )?);
                model.mix2 = Some(Layer::init(
                    LayerSpec::TemporalMix { frames: arch.frames },
                    &mut params,
                    "mix2",
                    &mut r,
                )?);
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn manifest(&self) -> String {
        let mut layers: Vec<&Layer> = vec![&self.conv_in, &self.t_proj];
        for l in [&self.mask_conv, &self.anat_conv, &self.ef_proj].into_iter().flatten() {
            layers.push(l);
        }
        layers.extend([&self.block1_norm, &self.block1_conv]);
        for l in [&self.mix1].into_iter().flatten() {
            layers.push(l);
        }
        layers.extend([&self.block2_norm, &self.block2_conv]);
        for l in [&self.mix2].into_iter().flatten() {
            layers.push(l);
        }
        layers.extend([&self.out_norm, &self.out_conv]);
        let extra = vec![format!(
            "flow({},k{},s{},t{},c{})",
            self.arch.variant.as_str(),
            self.arch.latent_channels,
            self.arch.latent_size,
            self.arch.frames,
            self.arch.channels
        )];
        manifest_of(&layers, &extra)
    }

    /// Reject conditioning fields the variant does not understand, and check
    /// the shapes of those it does.
    pub fn validate_cond(&self, c: &Cond) -> Result<()> {
        let ls = self.arch.latent_size;
        let k = self.arch.latent_channels;
        match self.arch.variant {
            FlowVariant::Image => {
                if c.anatomy.is_some() || c.ef.is_some() {
                    return Err(Error::Config(
                        "image flow accepts only view/mask conditioning".into(),
                    ));
                }
                if let Some(v) = c.view {
                    if v >= NUM_VIEWS {
                        return Err(Error::contract("velocity", format!("view {v} out of range")));
                    }
                }
                if let Some(m) = &c.mask {
                    if m.shape() != [ls, ls] {
                        return Err(Error::shape(
                            "velocity",
                            format!("mask {:?}, expected [{ls},{ls}]", m.shape()),
                        ));
                    }
                }
            }
            FlowVariant::Video => {
                if c.view.is_some() || c.mask.is_some() {
                    return Err(Error::Config(
                        "video flow accepts only anatomy/ef conditioning".into(),
                    ));
                }
                if let Some(a) = &c.anatomy {
                    if a.shape() != [k, ls, ls] {
                        return Err(Error::shape(
                            "velocity",
                            format!("anatomy {:?}, expected [{k},{ls},{ls}]", a.shape()),
                        ));
                    }
                }
                if let Some(ef) = c.ef {
                    if !ef.is_finite() {
                        return Err(Error::contract("velocity", "non-finite ef"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate_selector(&self, s: NegSelector) -> Result<()> {
        let ok = matches!(
            (self.arch.variant, s),
            (_, NegSelector::None)
                | (FlowVariant::Image, NegSelector::MaskOnly)
                | (FlowVariant::Image, NegSelector::ViewOnly)
                | (FlowVariant::Video, NegSelector::AnatomyOnly)
                | (FlowVariant::Video, NegSelector::EfOnly)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "negative selector `{}` not available for the {} variant",
                s.as_str(),
                self.arch.variant.as_str()
            )))
        }
    }

    /// Velocity network forward on a tape. `x` is `[B,K,h,w]` (image) or
    /// `[B,T,K,h,w]` (video); `t` is `[B]` in `[0,1]`; one condition set per
    /// sample.
    pub fn velocity_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        t: Var,
        conds: &[Cond],
        trainable: bool,
    ) -> Result<Var> {
        let (k, ch, ls, frames) = (
            self.arch.latent_channels,
            self.arch.channels,
            self.arch.latent_size,
            self.arch.frames,
        );
        let xs = tape.shape(x).to_vec();
        let expected: Vec<usize> = match self.arch.variant {
            FlowVariant::Image => vec![conds.len(), k, ls, ls],
            FlowVariant::Video => vec![conds.len(), frames, k, ls, ls],
        };
        if xs != expected {
            return Err(Error::shape(
                "velocity",
                format!("input {xs:?}, expected {expected:?}"),
            ));
        }
        if tape.shape(t) != [conds.len()] {
            return Err(Error::shape(
                "velocity",
                format!("t {:?}, expected [{}]", tape.shape(t), conds.len()),
            ));
        }
        for c in conds {
            self.validate_cond(c)?;
        }
        let b = conds.len();
        let p = &self.params;

        // conditioning vector [b, ch]: time embedding plus (video) EF branch
        // or (image) view embedding, with learned null rows where absent.
        let temb = tape.sin_embed(t, TIME_DIM);
        let mut cvec = self.t_proj.forward(tape, p, temb, trainable)?;
        match self.arch.variant {
            FlowVariant::Image => {
                let idx: Vec<usize> = conds.iter().map(|c| c.view.unwrap_or(0) as usize).collect();
                let present: Vec<bool> = conds.iter().map(|c| c.view.is_some()).collect();
                let table = bind(tape, p, self.view_table.unwrap(), trainable);
                let rows = tape.embed_rows(table, &idx);
                let null = bind(tape, p, self.null_view.unwrap(), trainable);
                let nulls = tape.broadcast0(null, b);
                let views = tape.select_rows(&present, rows, nulls);
                cvec = tape.add(cvec, views);
            }
            FlowVariant::Video => {
                let efs: Vec<f32> = conds.iter().map(|c| c.ef.unwrap_or(0.0) / 100.0).collect();
                let present: Vec<bool> = conds.iter().map(|c| c.ef.is_some()).collect();
                let efv = tape.constant(Tensor::new([b], efs)?);
                let ef_emb = tape.sin_embed(efv, TIME_DIM);
                let ef_rows = self.ef_proj.as_ref().unwrap().forward(tape, p, ef_emb, trainable)?;
                let null = bind(tape, p, self.null_ef.unwrap(), trainable);
                let nulls = tape.broadcast0(null, b);
                let ef_sel = tape.select_rows(&present, ef_rows, nulls);
                cvec = tape.add(cvec, ef_sel);
            }
        }

        // trunk input: flatten frames for per-frame convolution
        let (xf, reps) = match self.arch.variant {
            FlowVariant::Image => (x, 1),
            FlowVariant::Video => (tape.reshape(x, [b * frames, k, ls, ls]), frames),
        };
        let mut h = self.conv_in.forward(tape, p, xf, trainable)?;

        // spatial conditioning branch
        match self.arch.variant {
            FlowVariant::Image => {
                let mut stacked = Tensor::zeros([b, 1, ls, ls]);
                let present: Vec<bool> = conds.iter().map(|c| c.mask.is_some()).collect();
                for (i, c) in conds.iter().enumerate() {
                    if let Some(m) = &c.mask {
                        stacked.data_mut()[i * ls * ls..(i + 1) * ls * ls].copy_from_slice(m.data());
                    }
                }
                let data_side = tape.constant(stacked);
                let null = bind(tape, p, self.null_mask.unwrap(), trainable);
                let nulls = tape.broadcast0(null, b);
                let masks = tape.select_rows(&present, data_side, nulls);
                let m = self.mask_conv.as_ref().unwrap().forward(tape, p, masks, trainable)?;
                h = tape.add(h, m);
            }
            FlowVariant::Video => {
                let mut stacked = Tensor::zeros([b, k, ls, ls]);
                let present: Vec<bool> = conds.iter().map(|c| c.anatomy.is_some()).collect();
                let row = k * ls * ls;
                for (i, c) in conds.iter().enumerate() {
                    if let Some(a) = &c.anatomy {
                        stacked.data_mut()[i * row..(i + 1) * row].copy_from_slice(a.data());
                    }
                }
                let data_side = tape.constant(stacked);
                let null = bind(tape, p, self.null_anatomy.unwrap(), trainable);
                let nulls = tape.broadcast0(null, b);
                let anats = tape.select_rows(&present, data_side, nulls);
                let a = self.anat_conv.as_ref().unwrap().forward(tape, p, anats, trainable)?;
                let a_rep = tape.repeat_rows(a, frames);
                h = tape.add(h, a_rep);
            }
        }

        // inject the conditioning vector as a per-channel bias
        let crep = if reps == 1 { cvec } else { tape.repeat_rows(cvec, reps) };
        h = tape.add_channel_map(h, crep);
        h = tape.silu(h);

        // residual block 1
        let r1 = self.block1_norm.forward(tape, p, h, trainable)?;
        let r1 = tape.silu(r1);
        let r1 = self.block1_conv.forward(tape, p, r1, trainable)?;
        h = tape.add(h, r1);
        if let Some(mix) = &self.mix1 {
            let flat = tape.reshape(h, [b, frames, ch * ls * ls]);
            let mixed = mix.forward(tape, p, flat, trainable)?;
            h = tape.reshape(mixed, [b * frames, ch, ls, ls]);
        }

        // residual block 2
        let r2 = self.block2_norm.forward(tape, p, h, trainable)?;
        let r2 = tape.silu(r2);
        let r2 = self.block2_conv.forward(tape, p, r2, trainable)?;
        h = tape.add(h, r2);
        if let Some(mix) = &self.mix2 {
            let flat = tape.reshape(h, [b, frames, ch * ls * ls]);
            let mixed = mix.forward(tape, p, flat, trainable)?;
            h = tape.reshape(mixed, [b * frames, ch, ls, ls]);
        }

        // output head
        let o = self.out_norm.forward(tape, p, h, trainable)?;
        let o = tape.silu(o);
        let o = self.out_conv.forward(tape, p, o, trainable)?;
        Ok(match self.arch.variant {
            FlowVariant::Image => o,
            FlowVariant::Video => tape.reshape(o, [b, frames, k, ls, ls]),
        })
    }

    /// Batched inference at a shared time value.
    pub fn velocity_batch(&self, x: &Tensor, t: f32, conds: &[Cond]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        let tv = tape.input(Tensor::full([conds.len()], t));
        let v = self.velocity_tape(&mut tape, xv, tv, conds, false)?;
        Ok(tape.value(v).clone())
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let kind = match self.arch.variant {
            FlowVariant::Image => "lifm",
            FlowVariant::Video => "lvfm",
        };
        let mut ck = Checkpoint::new(kind, config_hash, self.manifest());
        ck.push_meta("latent_channels", self.arch.latent_channels as f64);
        ck.push_meta("latent_size", self.arch.latent_size as f64);
        ck.push_meta("frames", self.arch.frames as f64);
        ck.push_meta("channels", self.arch.channels as f64);
        ck.push_store("flow", &self.params);
        ck.save(path)
    }

    pub fn load(path: &Path, variant: FlowVariant) -> Result<(FlowModel, u64)> {
        let ck = Checkpoint::load(path)?;
        let arch = FlowArch {
            variant,
            latent_channels: ck.meta_value("latent_channels")? as usize,
            latent_size: ck.meta_value("latent_size")? as usize,
            frames: ck.meta_value("frames")? as usize,
            channels: ck.meta_value("channels")? as usize,
        };
        let mut model = FlowModel::new(arch, 0)?;
        let kind = match variant {
            FlowVariant::Image => "lifm",
            FlowVariant::Video => "lvfm",
        };
        ck.verify(kind, &model.manifest())?;
        ck.restore_store("flow", &mut model.params)?;
        Ok((model, ck.config_hash))
    }
}

fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
    if trainable {
        tape.param(store, id)
    } else {
        tape.frozen_param(store, id)
    }
}

impl VelocityField for FlowModel {
    fn sample_shape(&self) -> Vec<usize> {
        self.arch.sample_shape()
    }

    fn velocity(&self, x: &Tensor, t: f32, cond: &Cond) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let xb = x.clone().reshaped(shape)?;
        let v = self.velocity_batch(&xb, t, std::slice::from_ref(cond))?;
        v.reshaped(x.shape().to_vec())
    }
}

/// Batched Euler sampling with per-sample conditions and noise seeds.
/// Numerically identical to calling [`sample_euler`] per sample (every
/// per-sample computation is independent), just faster.
pub fn sample_euler_batch(
    model: &FlowModel,
    spec: &SamplerSpec,
    conds: &[Cond],
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    spec.validate()?;
    model.validate_selector(spec.negative)?;
    if conds.len() != seeds.len() {
        return Err(Error::contract("sample_euler", "conds and seeds disagree in length"));
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let shape = model.sample_shape();
    let row: usize = shape.iter().product();
    let mut batch_shape = vec![conds.len()];
    batch_shape.extend_from_slice(&shape);
    let mut x = Tensor::zeros(batch_shape);
    for (i, &s) in seeds.iter().enumerate() {
        let mut r = rng::stream(s, domains::SAMPLER, 0);
        let noise = Tensor::randn(shape.clone(), &mut r);
        x.data_mut()[i * row..(i + 1) * row].copy_from_slice(noise.data());
    }
    let neg_conds: Vec<Cond> = conds.iter().map(|c| spec.negative.apply(c)).collect();
    let dt = 1.0 / spec.steps as f32;
    for i in 0..spec.steps {
        let t = 1.0 - i as f32 * dt;
        let v = if spec.lambda_cfg == 1.0 {
            model.velocity_batch(&x, t, conds)?
        } else if spec.lambda_cfg == 0.0 {
            model.velocity_batch(&x, t, &neg_conds)?
        } else {
            let v_cond = model.velocity_batch(&x, t, conds)?;
            let v_neg = model.velocity_batch(&x, t, &neg_conds)?;
            v_neg.zip(&v_cond, |n, c| n + spec.lambda_cfg * (c - n))
        };
        x.add_scaled(&v, -dt);
        if !x.all_finite() {
            return Err(Error::Diverged {
                op: "sample_euler",
                step: i,
                detail: "non-finite state".into(),
            });
        }
    }
    let mut out = Vec::with_capacity(conds.len());
    for i in 0..conds.len() {
        out.push(Tensor::new(
            shape.clone(),
            x.data()[i * row..(i + 1) * row].to_vec(),
        )?);
    }
    Ok(out)
}

/// Animate an anatomy into a latent clip at the requested ejection fraction.
pub fn animate(model: &FlowModel, anatomy: &Tensor, ef: f32, spec: &SamplerSpec) -> Result<Tensor> {
    if model.arch.variant != FlowVariant::Video {
        return Err(Error::Config("animate requires the video variant".into()));
    }
    let cond = Cond::for_video(anatomy.clone(), ef);
    model.validate_cond(&cond)?;
    let out = sample_euler_batch(model, spec, &[cond], &[spec.seed])?;
    Ok(out.into_iter().next().unwrap())
}

// ───────────────────────── training ─────────────────────────

/// One image-flow training example: the ED-frame posterior plus its
/// conditioning (raw, un-normalized; draws are normalized per use).
#[derive(Debug, Clone)]
pub struct ImageExample {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Ventricle mask at latent resolution.
    pub mask: Tensor,
    pub view: u32,
}

/// One video-flow training example: per-frame posteriors plus the EF label.
#[derive(Debug, Clone)]
pub struct VideoExample {
    /// `[T,K,h,w]` posterior means.
    pub mu: Tensor,
    /// `[T,K,h,w]` posterior standard deviations.
    pub sigma: Tensor,
    pub ef: f32,
}

/// Draw the training pair for the video variant: the full clip as target and
/// an independently re-sampled ED-frame latent as the conditioning anatomy.
/// Both use fresh reparameterization noise, so the conditioning tensor never
/// coincides with any target frame — the model cannot satisfy the loss by
/// copying its conditioning through.
pub fn video_training_pair(
    ex: &VideoExample,
    stats: &LatentStats,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let code = crate::avae::LatentCode {
        mu: ex.mu.clone(),
        sigma: ex.sigma.clone(),
    };
    let clip = crate::avae::normalize_latent(&code.sample(rng), stats)?;
    let s = ex.mu.shape();
    let (k, h, w) = (s[1], s[2], s[3]);
    let row = k * h * w;
    let mu0 = Tensor::new([k, h, w], ex.mu.data()[..row].to_vec())?;
    let sig0 = Tensor::new([k, h, w], ex.sigma.data()[..row].to_vec())?;
    let anat_code = crate::avae::LatentCode { mu: mu0, sigma: sig0 };
    let anatomy = crate::avae::normalize_latent(&anat_code.sample(rng), stats)?;
    Ok((clip, anatomy))
}

#[derive(Debug, Clone, Copy)]
pub struct FlowTrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Per-condition dropout probability.
    pub p_drop: f32,
    /// Probability of dropping the whole conditioning set.
    pub p_drop_all: f32,
    pub seed: u64,
}

impl Default for FlowTrainSpec {
    fn default() -> Self {
        FlowTrainSpec {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            p_drop: 0.1,
            p_drop_all: 0.1,
            seed: 0,
        }
    }
}

/// Warn (once per call site) when inputs do not look like normalized latents.
fn warn_if_unnormalized(sample: &Tensor, k: usize) {
    let hw: usize = sample.shape()[sample.shape().len() - 2..].iter().product();
    let n = sample.numel();
    for ki in 0..k {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut cnt = 0usize;
        for i in 0..n {
            if (i / hw) % k == ki {
                sum += sample.data()[i] as f64;
                sumsq += (sample.data()[i] as f64).powi(2);
                cnt += 1;
            }
        }
        let mean = sum / cnt as f64;
        let std = (sumsq / cnt as f64 - mean * mean).max(0.0).sqrt();
        if !(0.25..=4.0).contains(&std) {
            log::warn!("flow training input channel {ki} has std {std:.3}; expected normalized latents");
        }
    }
}

/// Train the image variant. Examples are re-sampled from their posteriors
/// and normalized each time they are drawn into a batch.
pub fn train_image_flow(
    model: &mut FlowModel,
    data: &[ImageExample],
    stats: &LatentStats,
    spec: &FlowTrainSpec,
) -> Result<Vec<f32>> {
    if model.arch.variant != FlowVariant::Image {
        return Err(Error::Config("train_image_flow needs an image-variant model".into()));
    }
    if data.is_empty() || spec.steps == 0 || spec.batch == 0 {
        return Err(Error::contract("train_image_flow", "empty data or zero budget"));
    }
    let (k, ls) = (model.arch.latent_channels, model.arch.latent_size);
    let row = k * ls * ls;
    let mut opt = Adam::new(&model.params, spec.lr);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut r = rng::stream(spec.seed, domains::LIFM, step as u64);
        let b = spec.batch;
        let mut x0 = Tensor::zeros([b, k, ls, ls]);
        let mut conds = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for bi in 0..b {
            let ex = &data[r.random_range(0..data.len())];
            let code = crate::avae::LatentCode {
                mu: ex.mu.clone(),
                sigma: ex.sigma.clone(),
            };
            let z = crate::avae::normalize_latent(&code.sample(&mut r), stats)?;
            x0.data_mut()[bi * row..(bi + 1) * row].copy_from_slice(z.data());
            let drop = sample_cond_drop(&mut r, spec.p_drop, spec.p_drop_all);
            conds.push(drop.apply(&Cond::for_image(ex.view, ex.mask.clone())));
            ts.push(r.random_range(0.0f32..1.0));
        }
        if step == 0 {
            warn_if_unnormalized(&x0, k);
        }
        let x1 = Tensor::randn([b, k, ls, ls], &mut r);
        let mut tape = Tape::new();
        let loss = fm_loss_on_tape(&mut tape, &x0, &x1, &ts, |tape, xt, tv| {
            model.velocity_tape(tape, xt, tv, &conds, true)
        })?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                op: "train_image_flow",
                step,
                detail: format!("loss {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut model.params, &grads.for_params())?;
        losses.push(value);
    }
    Ok(losses)
}

/// Train the video variant on full-clip targets conditioned on re-sampled
/// ED anatomies and EF labels.
pub fn train_video_flow(
    model: &mut FlowModel,
    data: &[VideoExample],
    stats: &LatentStats,
    spec: &FlowTrainSpec,
) -> Result<Vec<f32>> {
    if model.arch.variant != FlowVariant::Video {
        return Err(Error::Config("train_video_flow needs a video-variant model".into()));
    }
    if data.is_empty() || spec.steps == 0 || spec.batch == 0 {
        return Err(Error::contract("train_video_flow", "empty data or zero budget"));
    }
    let (k, ls, frames) = (
        model.arch.latent_channels,
        model.arch.latent_size,
        model.arch.frames,
    );
    for ex in data {
        if ex.mu.shape() != [frames, k, ls, ls] {
            return Err(Error::shape(
                "train_video_flow",
                format!("example {:?}, model expects [{frames},{k},{ls},{ls}]", ex.mu.shape()),
            ));
        }
    }
    let row = frames * k * ls * ls;
    let mut opt = Adam::new(&model.params, spec.lr);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut r = rng::stream(spec.seed, domains::LVFM, step as u64);
        let b = spec.batch;
        let mut x0 = Tensor::zeros([b, frames, k, ls, ls]);
        let mut conds = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for bi in 0..b {
            let ex = &data[r.random_range(0..data.len())];
            let (clip, anatomy) = video_training_pair(ex, stats, &mut r)?;
            x0.data_mut()[bi * row..(bi + 1) * row].copy_from_slice(clip.data());
            let drop = sample_cond_drop(&mut r, spec.p_drop, spec.p_drop_all);
            conds.push(drop.apply(&Cond::for_video(anatomy, ex.ef)));
            ts.push(r.random_range(0.0f32..1.0));
        }
        if step == 0 {
            warn_if_unnormalized(&x0, k);
        }
        let x1 = Tensor::randn([b, frames, k, ls, ls], &mut r);
        let mut tape = Tape::new();
        let loss = fm_loss_on_tape(&mut tape, &x0, &x1, &ts, |tape, xt, tv| {
            model.velocity_tape(tape, xt, tv, &conds, true)
        })?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                op: "train_video_flow",
                step,
                detail: format!("loss {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut model.params, &grads.for_params())?;
        losses.push(value);
    }
    Ok(losses)
}
