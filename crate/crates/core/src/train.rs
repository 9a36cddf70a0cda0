//! Per-frame optimization.
//!
//! Three objectives share one optimizer:
//!
//! * [`LossMode::Reconstruction`]: image loss alone, used for the first frame;
//! * [`LossMode::GroupFrame`]: image loss plus the L1 norm of the motion
//!   relative to the previous frame of the group;
//! * [`LossMode::Keyframe`]: image loss plus the L1 distance to the previous
//!   frame over its first `U` primitives, plus the count penalty
//!   `max(0, N - U)`.
//!
//! Motion is represented directly as per-primitive parameter deltas. The
//! optimizer is proximal gradient descent with a backtracking line search:
//! the smooth image loss takes a preconditioned gradient step, the L1 terms
//! are handled by soft-thresholding (which is what drives unused delta
//! components to exactly zero), and a step is kept only if the objective did
//! not go up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{self, ssim_with_grad};
use crate::model::{
    apply_to_frame, diff_frames, layout, CanonicalSpace, DeltaTensor, GaussianFrame, GaussianPrimitive, ShDegree,
};
use crate::render::{Camera, RenderedImage, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the D-SSIM term inside the image loss.
    pub lambda_dssim: f64,
    pub lambda_temp: f64,
    pub lambda_inf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dssim: 0.2,
            lambda_temp: 1e-3,
            lambda_inf: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_dssim) || self.lambda_dssim > 1.0 {
            return Err(Error::validation("lambda_dssim must lie in [0, 1]"));
        }
        if !ok(self.lambda_temp) || !ok(self.lambda_inf) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Typical per-iteration move of each attribute, in parameter units.
///
/// The descent direction is the gradient divided by its running RMS, so a
/// full step moves every coordinate by about its scale; the line search then
/// shrinks or grows all of them together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepScales {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub sh: f64,
}

impl Default for StepScales {
    fn default() -> Self {
        StepScales {
            position: 0.01,
            rotation: 0.02,
            log_scale: 0.02,
            opacity: 0.05,
            color: 0.05,
            sh: 0.02,
        }
    }
}

impl StepScales {
    fn per_param(&self, degree: ShDegree) -> Vec<f64> {
        let mut v = vec![self.sh; degree.param_len()];
        v[layout::POSITION..layout::ROTATION].fill(self.position);
        v[layout::ROTATION..layout::LOG_SCALE].fill(self.rotation);
        v[layout::LOG_SCALE..layout::OPACITY].fill(self.log_scale);
        v[layout::OPACITY] = self.opacity;
        v[layout::COLOR..layout::SH].fill(self.color);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Initial global step multiplier; the line search rescales it.
    pub step_size: f64,
    pub step_scales: StepScales,
    /// Mean world-space positional gradient norm above which a primitive is
    /// cloned or split.
    pub densify_grad_threshold: f64,
    pub densify_interval: usize,
    /// No densification after this iteration.
    pub densify_until: usize,
    pub cull_opacity: f64,
    /// Overrides `U` for keyframe fits; by default it is the previous
    /// canonical count.
    pub capacity_u: Option<usize>,
    /// Largest primitive count an attribute image may hold.
    pub image_capacity: usize,
    /// Half-width of the scene bounds; also the reference length for the
    /// split-versus-clone decision.
    pub scene_extent: f64,
    /// Split instead of clone when the largest scale exceeds this fraction of
    /// the scene extent.
    pub split_fraction: f64,
    /// First-frame fit: random primitive count, isotropic scale, iterations.
    pub init_primitives: usize,
    pub init_scale: f64,
    pub init_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 150,
            step_size: 1.0,
            step_scales: StepScales::default(),
            densify_grad_threshold: 3e-3,
            densify_interval: 25,
            densify_until: 100,
            cull_opacity: 0.005,
            capacity_u: None,
            image_capacity: 4096,
            scene_extent: 1.0,
            split_fraction: 0.01,
            init_primitives: 60,
            init_scale: 0.15,
            init_iterations: 600,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.init_iterations == 0 {
            return Err(Error::validation("iterations must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::validation("step size must be positive"));
        }
        if !(self.cull_opacity > 0.0 && self.cull_opacity < 1.0) {
            return Err(Error::validation("cull opacity must lie in (0, 1)"));
        }
        if self.densify_interval == 0 {
            return Err(Error::validation("densify interval must be positive"));
        }
        if !(self.scene_extent > 0.0) || !(self.init_scale > 0.0) {
            return Err(Error::validation("scene extent and init scale must be positive"));
        }
        if self.init_primitives == 0 {
            return Err(Error::validation("first-frame fit needs at least one primitive"));
        }
        Ok(())
    }
}

/// Target images of one time step, one per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    images: Vec<RenderedImage>,
}

impl GroundTruth {
    pub fn new(images: Vec<RenderedImage>, cams: &[Camera]) -> Result<Self> {
        if images.len() != cams.len() || cams.is_empty() {
            return Err(Error::structural(format!(
                "{} target images for {} cameras",
                images.len(),
                cams.len()
            )));
        }
        for (k, (img, cam)) in images.iter().zip(cams).enumerate() {
            if img.width() != cam.width() || img.height() != cam.height() {
                return Err(Error::structural(format!(
                    "target {k} is {}x{}, camera is {}x{}",
                    img.width(),
                    img.height(),
                    cam.width(),
                    cam.height()
                )));
            }
        }
        Ok(GroundTruth { images })
    }

    /// Renders `frame` from every camera.
    pub fn from_frame(frame: &GaussianFrame, cams: &[Camera]) -> Result<Self> {
        GroundTruth::new(crate::render::render_views(frame, cams)?, cams)
    }

    pub fn images(&self) -> &[RenderedImage] {
        &self.images
    }
}

/// `(1 - λ) L1 + λ (1 - SSIM) / 2`.
pub fn loss_3dgs(rendered: &RenderedImage, target: &RenderedImage, lambda_dssim: f64) -> Result<f64> {
    let l1 = metrics::l1(rendered, target)?;
    let s = metrics::ssim(rendered, target)?;
    Ok((1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0)
}

pub fn loss_temporal(delta: &DeltaTensor) -> f64 {
    delta.l1_norm()
}

/// L1 distance between the parameter vectors of the first `u` primitives.
pub fn loss_keyframe_temporal(current: &GaussianFrame, previous: &GaussianFrame, u: usize) -> Result<f64> {
    if current.sh_degree() != previous.sh_degree() {
        return Err(Error::structural("frames differ in SH degree"));
    }
    let reg = u.min(current.len()).min(previous.len()) * current.param_len();
    let a = current.flat_params();
    let b = previous.flat_params();
    Ok(a[..reg].iter().zip(&b[..reg]).map(|(x, y)| (x - y).abs()).sum())
}

pub fn loss_inflation(n_current: usize, u: usize) -> f64 {
    n_current.saturating_sub(u) as f64
}

/// Which total loss [`gradients`] and [`evaluate_loss`] work on.
#[derive(Debug, Clone, Copy)]
pub enum LossMode<'a> {
    Reconstruction,
    /// `base` is the previous frame of the group; the motion is the
    /// difference to it.
    GroupFrame { base: &'a GaussianFrame },
    Keyframe {
        previous: &'a GaussianFrame,
        capacity_u: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l3dgs: f64,
    /// Unweighted temporal term.
    pub temporal: f64,
    /// Unweighted count penalty.
    pub inflation: f64,
}

fn check_inputs(frame: &GaussianFrame, cams: &[Camera], target: &GroundTruth) -> Result<()> {
    if cams.len() != target.images.len() {
        return Err(Error::structural(format!(
            "{} cameras for {} target images",
            cams.len(),
            target.images.len()
        )));
    }
    GroundTruth::new(target.images.clone(), cams).map(|_| ())?;
    if frame.is_empty() {
        return Err(Error::structural("frame has no primitives"));
    }
    Ok(())
}

/// Flat anchor for the L1 term: the temporal loss is
/// `sum |theta[k] - anchor[k]|` over `k < anchor.len()`.
fn anchor_for(frame: &GaussianFrame, mode: &LossMode) -> Result<Vec<f64>> {
    Ok(match *mode {
        LossMode::Reconstruction => Vec::new(),
        LossMode::GroupFrame { base } => {
            if base.len() != frame.len() || base.sh_degree() != frame.sh_degree() {
                return Err(Error::structural("group frame and its base differ in shape"));
            }
            base.flat_params()
        }
        LossMode::Keyframe {
            previous,
            capacity_u,
        } => {
            if previous.sh_degree() != frame.sh_degree() {
                return Err(Error::structural("keyframe and previous frame differ in SH degree"));
            }
            let n = capacity_u.min(previous.len()).min(frame.len());
            let mut p = previous.flat_params();
            p.truncate(n * frame.param_len());
            p
        }
    })
}

fn l1_to_anchor(theta: &[f64], anchor: &[f64]) -> f64 {
    theta.iter().zip(anchor).map(|(x, a)| (x - a).abs()).sum()
}

/// Image loss at one point, with per-camera tapes kept for the gradient.
struct ImageEval {
    loss: f64,
    /// Same loss with the L1 term Huber-smoothed; what the line search sees.
    smooth: f64,
    tapes: Vec<(Tape, Vec<f64>)>,
}

/// With `huber > 0` the returned gradient is that of the smoothed loss.
fn image_eval(
    frame: &GaussianFrame,
    cams: &[Camera],
    target: &GroundTruth,
    lambda: f64,
    huber: f64,
) -> Result<ImageEval> {
    let ncam = cams.len() as f64;
    let per_cam = exec::map_range(cams.len(), |k| -> Result<(f64, f64, Tape, Vec<f64>)> {
        let (img, tape) = Tape::record(frame, &cams[k])?;
        let tgt = &target.images[k];
        let n = img.pixels().len() as f64;
        let (s, ds) = ssim_with_grad(&img, tgt)?;
        let mut l1 = 0.0;
        let mut hub = 0.0;
        let dimg = img
            .pixels()
            .iter()
            .zip(tgt.pixels())
            .zip(&ds)
            .map(|((a, b), g)| {
                let r = a - b;
                l1 += r.abs();
                let d = if huber > 0.0 {
                    if r.abs() <= huber {
                        hub += r * r / (2.0 * huber);
                        r / huber
                    } else {
                        hub += r.abs() - 0.5 * huber;
                        r.signum()
                    }
                } else if r != 0.0 {
                    r.signum()
                } else {
                    0.0
                };
                ((1.0 - lambda) * d / n - 0.5 * lambda * g) / ncam
            })
            .collect();
        let dssim = lambda * (1.0 - s) / 2.0;
        let exact = (1.0 - lambda) * l1 / n + dssim;
        let smooth = if huber > 0.0 {
            (1.0 - lambda) * hub / n + dssim
        } else {
            exact
        };
        Ok((exact, smooth, tape, dimg))
    });
    let mut loss = 0.0;
    let mut smooth = 0.0;
    let mut tapes = Vec::with_capacity(cams.len());
    for r in per_cam {
        let (l, sm, t, d) = r?;
        loss += l;
        smooth += sm;
        tapes.push((t, d));
    }
    Ok(ImageEval {
        loss: loss / ncam,
        smooth: smooth / ncam,
        tapes,
    })
}

fn image_grad(frame: &GaussianFrame, eval: &ImageEval) -> Vec<f64> {
    let len = frame.len() * frame.param_len();
    let parts = exec::map(&eval.tapes, |(tape, dimg)| {
        let mut g = vec![0.0; len];
        tape.backward(frame, dimg, &mut g);
        g
    });
    let mut out = vec![0.0; len];
    for g in parts {
        for (o, v) in out.iter_mut().zip(g) {
            *o += v;
        }
    }
    out
}

fn breakdown(l3dgs: f64, temporal: f64, live: usize, w: &LossWeights, mode: &LossMode) -> LossBreakdown {
    let inflation = match *mode {
        LossMode::Keyframe { capacity_u, .. } => loss_inflation(live, capacity_u),
        _ => 0.0,
    };
    LossBreakdown {
        total: l3dgs + w.lambda_temp * temporal + w.lambda_inf * inflation,
        l3dgs,
        temporal,
        inflation,
    }
}

/// Value of the selected total loss.
pub fn evaluate_loss(
    frame: &GaussianFrame,
    cams: &[Camera],
    target: &GroundTruth,
    w: &LossWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    w.validate()?;
    check_inputs(frame, cams, target)?;
    let anchor = anchor_for(frame, &mode)?;
    let l3 = exec::map_range(cams.len(), |k| {
        loss_3dgs(&crate::render::render(frame, &cams[k])?, &target.images[k], w.lambda_dssim)
    })
    .into_iter()
    .sum::<Result<f64>>()?
        / cams.len() as f64;
    let temporal = l1_to_anchor(&frame.flat_params(), &anchor);
    Ok(breakdown(l3, temporal, frame.live_count(), w, &mode))
}

/// Exact gradient of the selected total loss with respect to every
/// pre-activation parameter (flat, `n * param_len`). The L1 terms use the
/// subgradient `sign(0) = 0`; the count penalty contributes nothing.
pub fn gradients(
    frame: &GaussianFrame,
    cams: &[Camera],
    target: &GroundTruth,
    w: &LossWeights,
    mode: LossMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    w.validate()?;
    check_inputs(frame, cams, target)?;
    let anchor = anchor_for(frame, &mode)?;
    let theta = frame.flat_params();
    let eval = image_eval(frame, cams, target, w.lambda_dssim, 0.0)?;
    let mut grad = image_grad(frame, &eval);
    for ((g, x), a) in grad.iter_mut().zip(&theta).zip(&anchor) {
        let d = x - a;
        if d != 0.0 {
            *g += w.lambda_temp * d.signum();
        }
    }
    let temporal = l1_to_anchor(&theta, &anchor);
    Ok((breakdown(eval.loss, temporal, frame.live_count(), w, &mode), grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed which fragments
    /// survive, or straddled an L1 kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(coordinate, finite difference, analytic)` beyond tolerance.
    pub failures: Vec<(usize, f64, f64)>,
}

/// Compares [`gradients`] with central differences of [`evaluate_loss`] on
/// up to `coords` random coordinates. Relative error uses
/// `max(|fd|, |analytic|, 1e-7)` as the scale.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    frame: &GaussianFrame,
    cams: &[Camera],
    target: &GroundTruth,
    w: &LossWeights,
    mode: LossMode,
    coords: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let (_, g) = gradients(frame, cams, target, w, mode)?;
    let anchor = anchor_for(frame, &mode)?;
    let flat = frame.flat_params();
    // Fragment sets plus residual signs; the objective is smooth while both
    // stay fixed.
    let sig = |f: &GaussianFrame| -> Result<(Vec<u64>, Vec<std::cmp::Ordering>)> {
        let frags = cams
            .iter()
            .map(|c| crate::render::activity_signature(f, c))
            .collect::<Result<Vec<_>>>()?;
        let mut signs = Vec::new();
        for (c, t) in cams.iter().zip(target.images()) {
            let r = crate::render::render(f, c)?;
            signs.extend(r.pixels().iter().zip(t.pixels()).map(|(a, b)| a.total_cmp(b)));
        }
        Ok((frags, signs))
    };
    let base_sig = sig(frame)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradientCheck {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    while out.checked < coords && out.checked + out.skipped < coords * 4 {
        let k = rng.gen_range(0..flat.len());
        let d = anchor.get(k).map_or(f64::INFINITY, |a| (flat[k] - a).abs());
        if d > 0.0 && d <= h {
            out.skipped += 1;
            continue;
        }
        let mk = |delta: f64| {
            let mut p = flat.clone();
            p[k] += delta;
            GaussianFrame::from_flat_params(frame.frame_index, frame.group_key, frame.sh_degree(), &p)
        };
        let (up, dn) = (mk(h)?, mk(-h)?);
        if sig(&up)? != base_sig || sig(&dn)? != base_sig || sig(&mk(2.0 * h)?)? != base_sig || sig(&mk(-2.0 * h)?)? != base_sig {
            out.skipped += 1;
            continue;
        }
        let lu = evaluate_loss(&up, cams, target, w, mode)?.total;
        let ld = evaluate_loss(&dn, cams, target, w, mode)?.total;
        let fd = (lu - ld) / (2.0 * h);
        let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-7);
        out.max_rel_error = out.max_rel_error.max(rel);
        if rel > tol {
            out.failures.push((k, fd, g[k]));
        }
        out.checked += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_3dgs: f64,
    pub loss_temp: f64,
    pub loss_inf: f64,
    pub primitive_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    /// Iterations at which densification added primitives, with the count.
    pub densify_events: Vec<(usize, usize)>,
}

impl TrainLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn first(&self) -> Option<&IterationRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct GroupFit {
    /// Motion from the previous frame of the group to this one.
    pub delta: DeltaTensor,
    pub frame: GaussianFrame,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct KeyframeFit {
    pub space: CanonicalSpace,
    pub log: TrainLog,
}

struct Densify {
    threshold: f64,
    interval: usize,
    until: usize,
    split_size: f64,
}

struct Setup<'a> {
    cams: &'a [Camera],
    target: &'a GroundTruth,
    w: LossWeights,
    mode: LossMode<'a>,
    frame_index: u32,
    group_key: u32,
    iterations: usize,
    densify: Option<Densify>,
    cull: Option<f64>,
    /// Primitives at or past this index were added during this fit.
    added_from: usize,
    /// Return the visited iterate with the lowest exact objective instead of
    /// the last one. Only meaningful when the primitive set is fixed.
    keep_best: bool,
}

struct State {
    frame: GaussianFrame,
    theta: Vec<f64>,
    eval: ImageEval,
    temporal: f64,
}

impl State {
    fn new(frame: GaussianFrame, setup: &Setup, anchor: &[f64]) -> Result<State> {
        let eval = image_eval(&frame, setup.cams, setup.target, setup.w.lambda_dssim, HUBER_DELTA)?;
        let theta = frame.flat_params();
        let temporal = l1_to_anchor(&theta, anchor);
        Ok(State {
            frame,
            theta,
            eval,
            temporal,
        })
    }

    /// What the line search minimizes.
    fn objective(&self, w: &LossWeights) -> f64 {
        self.eval.smooth + w.lambda_temp * self.temporal
    }

    fn true_objective(&self, w: &LossWeights) -> f64 {
        self.eval.loss + w.lambda_temp * self.temporal
    }
}

/// Opacity logits nudged down by the inflation surrogate.
fn inflation_targets(frame: &GaussianFrame, capacity_u: usize, added_from: usize) -> Vec<usize> {
    let live = frame.live_count();
    if live <= capacity_u {
        return Vec::new();
    }
    let mut added: Vec<usize> = (added_from..frame.len())
        .filter(|&i| !frame.primitives()[i].is_tombstone())
        .collect();
    added.sort_by(|&a, &b| {
        frame.primitives()[a]
            .opacity_logit
            .total_cmp(&frame.primitives()[b].opacity_logit)
            .then(a.cmp(&b))
    });
    added.truncate(live - capacity_u);
    added
}

/// Kink width of the smoothed L1 used by the optimizer. The exact L1 has a
/// kink at every pixel that already matches, and a plain line search stalls
/// on them.
const HUBER_DELTA: f64 = 2e-3;
const RMS_DECAY: f64 = 0.9;
/// Gradients below this RMS are not amplified.
const RMS_FLOOR: f64 = 1e-7;
const MAX_STEP: f64 = 4.0;
const MIN_STEP: f64 = 1e-7;

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn run(setup: &Setup, start: GaussianFrame, cfg: &TrainConfig) -> Result<(GaussianFrame, TrainLog)> {
    let degree = start.sh_degree();
    let plen = degree.param_len();
    let scales = cfg.step_scales.per_param(degree);
    let anchor = anchor_for(&start, &setup.mode)?;
    let w = setup.w;
    let mut st = State::new(start, setup, &anchor)?;
    if !st.eval.loss.is_finite() {
        return Err(Error::Training {
            iteration: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    let mut log = TrainLog::default();
    let mut step = cfg.step_size;
    let mut second = vec![0.0; st.theta.len()];
    let mut rounds = 0i32;
    let mut accum = vec![0.0; st.frame.len()];
    let mut accum_dir = vec![[0.0; 3]; st.frame.len()];
    let mut accum_n = vec![0usize; st.frame.len()];
    let inf_capacity = match setup.mode {
        LossMode::Keyframe { capacity_u, .. } => Some(capacity_u),
        _ => None,
    };
    let record = |log: &mut TrainLog, it: usize, st: &State| {
        let b = breakdown(st.eval.loss, st.temporal, st.frame.live_count(), &w, &setup.mode);
        log.records.push(IterationRecord {
            iteration: it,
            loss_total: b.total,
            loss_3dgs: b.l3dgs,
            loss_temp: b.temporal,
            loss_inf: b.inflation,
            primitive_count: st.frame.live_count(),
        });
    };
    record(&mut log, 0, &st);
    let mut best = (st.true_objective(&w), st.frame.clone());

    for it in 1..=setup.iterations {
        let mut grad = image_grad(&st.frame, &st.eval);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration: it,
                reason: "non-finite gradient".into(),
            });
        }
        let frozen: Vec<bool> = st.frame.primitives().iter().map(|p| p.is_tombstone()).collect();
        if setup.densify.is_some() {
            for i in 0..st.frame.len() {
                if frozen[i] {
                    continue;
                }
                let g = &grad[i * plen + layout::POSITION..i * plen + layout::POSITION + 3];
                accum[i] += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                for k in 0..3 {
                    accum_dir[i][k] += g[k];
                }
                accum_n[i] += 1;
            }
        }
        // Inflation surrogate: a constant push on the opacity logit of the
        // weakest recent additions while the count exceeds U. It is the
        // gradient of `lambda_inf * sum(logit)` over the selected set, which
        // is added to the line-search objective so steps stay descent steps.
        let inflated = match inf_capacity {
            Some(u) if w.lambda_inf > 0.0 => inflation_targets(&st.frame, u, setup.added_from),
            _ => Vec::new(),
        };
        for &i in &inflated {
            grad[i * plen + layout::OPACITY] += w.lambda_inf;
        }
        let potential = |theta: &[f64]| -> f64 {
            w.lambda_inf * inflated.iter().map(|&i| theta[i * plen + layout::OPACITY]).sum::<f64>()
        };
        let f0 = st.objective(&w) + potential(&st.theta);
        rounds += 1;
        let bias = 1.0 - RMS_DECAY.powi(rounds);
        second.resize(st.theta.len(), 0.0);
        let metric: Vec<f64> = second
            .iter_mut()
            .zip(&grad)
            .enumerate()
            .map(|(k, (v, g))| {
                *v = RMS_DECAY * *v + (1.0 - RMS_DECAY) * g * g;
                scales[k % plen] / ((*v / bias).sqrt() + RMS_FLOOR)
            })
            .collect();

        let mut accepted = None;
        for _ in 0..=20 {
            let mut trial = st.theta.clone();
            for (k, v) in trial.iter_mut().enumerate() {
                if frozen[k / plen] {
                    continue;
                }
                let s = step * metric[k];
                *v -= s * grad[k];
                if k < anchor.len() && w.lambda_temp > 0.0 {
                    *v = anchor[k] + soft(*v - anchor[k], s * w.lambda_temp);
                }
            }
            if trial.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    iteration: it,
                    reason: "parameters diverged to non-finite values".into(),
                });
            }
            // Keep quaternions away from zero so the frame stays valid.
            for i in 0..st.frame.len() {
                let q = &trial[i * plen + layout::ROTATION..i * plen + layout::LOG_SCALE];
                if q.iter().map(|v| v * v).sum::<f64>() < 1e-12 {
                    trial[i * plen + layout::ROTATION..i * plen + layout::LOG_SCALE]
                        .copy_from_slice(&st.theta[i * plen + layout::ROTATION..i * plen + layout::LOG_SCALE]);
                }
            }
            let frame = GaussianFrame::from_flat_params(setup.frame_index, setup.group_key, degree, &trial)
                .map_err(|e| Error::Training {
                    iteration: it,
                    reason: e.to_string(),
                })?;
            let next = State::new(frame, setup, &anchor)?;
            let f1 = next.objective(&w) + potential(&next.theta);
            if f1.is_nan() {
                return Err(Error::Training {
                    iteration: it,
                    reason: "loss is NaN".into(),
                });
            }
            if f1 <= f0 {
                accepted = Some(next);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            // No descent along the current direction: converged.
            break;
        };
        if step < MIN_STEP && setup.densify.is_none() {
            st = next;
            record(&mut log, it, &st);
            if setup.keep_best && st.true_objective(&w) <= best.0 {
                best = (st.true_objective(&w), st.frame.clone());
            }
            break;
        }
        st = next;
        log::trace!("iteration {it}: step {step:.4}, image loss {:.6e}", st.eval.loss);
        step = (step * 1.2).min(MAX_STEP);

        if let Some(eps) = setup.cull {
            let mut culled = false;
            let mut frame = st.frame.clone();
            for p in frame.primitives_mut() {
                if !p.is_tombstone() && p.opacity() < eps {
                    p.tombstone();
                    culled = true;
                }
            }
            if culled {
                st = State::new(frame, setup, &anchor)?;
            }
        }

        if let Some(d) = &setup.densify {
            if it % d.interval == 0 && it <= d.until {
                let added = densify(&mut st.frame, &accum, &accum_dir, &accum_n, d)?;
                if added > 0 {
                    if st.frame.len() > cfg.image_capacity {
                        return Err(Error::Capacity {
                            count: st.frame.len(),
                            capacity: cfg.image_capacity,
                        });
                    }
                    log.densify_events.push((it, added));
                    let frame = st.frame.clone();
                    st = State::new(frame, setup, &anchor)?;
                    // The set changed: earlier step shrinkage and moment
                    // estimates say nothing about the new landscape.
                    step = cfg.step_size;
                    second.iter_mut().for_each(|v| *v = 0.0);
                    rounds = 0;
                }
                accum = vec![0.0; st.frame.len()];
                accum_dir = vec![[0.0; 3]; st.frame.len()];
                accum_n = vec![0; st.frame.len()];
            }
        }
        record(&mut log, it, &st);
        if setup.keep_best && st.true_objective(&w) <= best.0 {
            best = (st.true_objective(&w), st.frame.clone());
        }
    }
    if setup.keep_best {
        let v = best.0;
        if let Some(r) = log.records.iter().rposition(|r| r.loss_total == v) {
            log.records.truncate(r + 1);
        }
        return Ok((best.1, log));
    }
    Ok((st.frame, log))
}

/// Clones small and splits large primitives with a high mean positional
/// gradient. Returns the number of primitives appended.
fn densify(
    frame: &mut GaussianFrame,
    accum: &[f64],
    dir: &[[f64; 3]],
    n: &[usize],
    d: &Densify,
) -> Result<usize> {
    let before = frame.len();
    let picked: Vec<usize> = (0..before)
        .filter(|&i| n[i] > 0 && !frame.primitives()[i].is_tombstone() && accum[i] / n[i] as f64 > d.threshold)
        .collect();
    for i in picked {
        let p = frame.primitives()[i];
        let s = p.scale();
        let (major, smax) = (0..3).fold((0, s[0]), |acc, k| if s[k] > acc.1 { (k, s[k]) } else { acc });
        let rot = crate::render::quat_to_mat(p.unit_rotation());
        let axis = [rot[0][major], rot[1][major], rot[2][major]];
        if smax > d.split_size {
            let shrink = 1.6f64.ln();
            let mut a = p;
            let mut b = p;
            for k in 0..3 {
                a.position[k] += smax * axis[k];
                b.position[k] -= smax * axis[k];
                a.log_scale[k] -= shrink;
                b.log_scale[k] -= shrink;
            }
            frame.primitives_mut()[i] = a;
            frame.push(b)?;
        } else {
            let g = dir[i];
            let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let mut c = p;
            if gn > 0.0 {
                for k in 0..3 {
                    c.position[k] -= 0.5 * smax * g[k] / gn;
                }
            }
            frame.push(c)?;
        }
    }
    Ok(frame.len() - before)
}

fn densify_for(cfg: &TrainConfig) -> Densify {
    Densify {
        threshold: cfg.densify_grad_threshold,
        interval: cfg.densify_interval,
        until: cfg.densify_until,
        split_size: cfg.split_fraction * cfg.scene_extent,
    }
}

/// Fits the motion of one group frame. `prev_delta` reconstructs frame
/// `t - 1` from `space`; the returned delta takes frame `t - 1` to frame `t`
/// over the same primitives.
pub fn fit_group_frame(
    space: &CanonicalSpace,
    prev_delta: &DeltaTensor,
    target: &GroundTruth,
    cams: &[Camera],
    w: &LossWeights,
    cfg: &TrainConfig,
    frame_index: u32,
) -> Result<GroupFit> {
    w.validate()?;
    cfg.validate()?;
    let base = apply_to_frame(space.frame(), prev_delta)?.with_index(frame_index, space.key());
    check_inputs(&base, cams, target)?;
    let setup = Setup {
        cams,
        target,
        w: *w,
        mode: LossMode::GroupFrame { base: &base },
        frame_index,
        group_key: space.key(),
        iterations: cfg.iterations,
        densify: None,
        cull: None,
        added_from: base.len(),
        keep_best: true,
    };
    let (frame, log) = run(&setup, base.clone(), cfg)?;
    let frame = frame.snapped();
    let delta = diff_frames(&base, &frame)?;
    Ok(GroupFit { delta, frame, log })
}

/// Rebuilds a canonical space at a keyframe, starting from the previous
/// frame. The returned space is compacted (culled primitives removed) and
/// its `capacity_u` is its own count, which is the `U` of the next keyframe.
pub fn fit_keyframe(
    previous: &GaussianFrame,
    target: &GroundTruth,
    cams: &[Camera],
    w: &LossWeights,
    cfg: &TrainConfig,
    frame_index: u32,
) -> Result<KeyframeFit> {
    w.validate()?;
    cfg.validate()?;
    check_inputs(previous, cams, target)?;
    let start = previous.clone().with_index(frame_index, frame_index);
    let u = cfg.capacity_u.unwrap_or(previous.live_count());
    let setup = Setup {
        cams,
        target,
        w: *w,
        mode: LossMode::Keyframe {
            previous,
            capacity_u: u,
        },
        frame_index,
        group_key: frame_index,
        iterations: cfg.iterations,
        densify: Some(densify_for(cfg)),
        cull: Some(cfg.cull_opacity),
        added_from: previous.len(),
        keep_best: false,
    };
    let (frame, log) = run(&setup, start, cfg)?;
    finish_space(frame, log)
}

fn finish_space(frame: GaussianFrame, log: TrainLog) -> Result<KeyframeFit> {
    let frame = frame.compacted().snapped();
    let n = frame.len();
    Ok(KeyframeFit {
        space: CanonicalSpace::new(frame, n)?,
        log,
    })
}

/// Random primitives uniform in the scene bounds, isotropic, opacity
/// logit 0, mid-gray.
pub fn random_init(cfg: &TrainConfig, degree: ShDegree, frame_index: u32) -> Result<GaussianFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = cfg.scene_extent;
    let ls = cfg.init_scale.ln();
    let prims = (0..cfg.init_primitives)
        .map(|_| GaussianPrimitive {
            position: [rng.gen_range(-e..e), rng.gen_range(-e..e), rng.gen_range(-e..e)],
            log_scale: [ls; 3],
            ..Default::default()
        })
        .collect();
    GaussianFrame::new(frame_index, frame_index, degree, prims)
}

/// Fits the first frame of a sequence from a random start under the image
/// loss alone, with densification and culling.
pub fn fit_initial(
    target: &GroundTruth,
    cams: &[Camera],
    w: &LossWeights,
    cfg: &TrainConfig,
    degree: ShDegree,
    frame_index: u32,
) -> Result<KeyframeFit> {
    w.validate()?;
    cfg.validate()?;
    let start = random_init(cfg, degree, frame_index)?;
    check_inputs(&start, cams, target)?;
    let mut dens = densify_for(cfg);
    dens.until = cfg.init_iterations / 2;
    let setup = Setup {
        cams,
        target,
        w: *w,
        mode: LossMode::Reconstruction,
        frame_index,
        group_key: frame_index,
        iterations: cfg.init_iterations,
        densify: Some(dens),
        cull: Some(cfg.cull_opacity),
        added_from: 0,
        keep_best: false,
    };
    let (frame, log) = run(&setup, start, cfg)?;
    finish_space(frame, log)
}
