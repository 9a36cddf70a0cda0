//! Usage-ordered pruning of deltas and per-frame level selection.
//!
//! A level space lists, for increasing pruning ratios, the quality and wire
//! size of a delta after its lowest-usage entries are removed. Selection
//! keeps the levels before the first quality cliff and binary-searches them
//! for the least pruned level that fits the per-frame byte budget.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_delta, encode_delta};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics;
use crate::model::{apply_to_frame, DeltaTensor, GaussianFrame};
use crate::render::{render, Camera, UsageFrequency};

/// Division guard for a zero previous drop.
pub const MIN_PREVIOUS_DROP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningLevel {
    pub ratio: f64,
    pub quality_db: f64,
    pub size_bytes: usize,
    /// Primitive indices whose entries this level removes.
    pub pruned: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningLevelSpace {
    pub frame_index: u32,
    levels: Vec<PruningLevel>,
}

impl PruningLevelSpace {
    /// Ratios must start at 0 and increase strictly; sizes must decrease
    /// strictly.
    pub fn new(frame_index: u32, levels: Vec<PruningLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::structural("level space needs at least one level"));
        }
        if levels[0].ratio != 0.0 {
            return Err(Error::structural("first level must have ratio 0"));
        }
        for w in levels.windows(2) {
            if !(w[1].ratio > w[0].ratio) {
                return Err(Error::structural("ratios must increase strictly"));
            }
            if w[1].size_bytes >= w[0].size_bytes {
                return Err(Error::structural("sizes must decrease strictly"));
            }
        }
        Ok(PruningLevelSpace { frame_index, levels })
    }

    /// Builds a space from bare `(quality, size)` tuples with evenly spaced
    /// ratios.
    pub fn from_tuples(frame_index: u32, tuples: &[(f64, usize)]) -> Result<Self> {
        let n = tuples.len().max(2) - 1;
        let levels = tuples
            .iter()
            .enumerate()
            .map(|(i, &(q, s))| PruningLevel {
                ratio: i as f64 / n as f64,
                quality_db: q,
                size_bytes: s,
                pruned: Vec::new(),
            })
            .collect();
        PruningLevelSpace::new(frame_index, levels)
    }

    pub fn levels(&self) -> &[PruningLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn quality(&self, i: usize) -> f64 {
        self.levels[i].quality_db
    }

    pub fn size(&self, i: usize) -> usize {
        self.levels[i].size_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionContext {
    /// Available bandwidth, bits per second.
    pub bandwidth_bps: f64,
    /// Target frame rate, frames per second.
    pub target_rate: f64,
    pub cliff_beta: f64,
}

impl SelectionContext {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0) || !(self.target_rate > 0.0) || !(self.cliff_beta > 0.0) {
            return Err(Error::validation("bandwidth, frame rate and cliff multiplier must be positive"));
        }
        if !self.target_rate.is_finite() || !self.cliff_beta.is_finite() {
            return Err(Error::validation("frame rate and cliff multiplier must be finite"));
        }
        Ok(())
    }

    /// Per-frame budget `B / R` in bits.
    pub fn budget_bits(&self) -> f64 {
        self.bandwidth_bps / self.target_rate
    }

    pub fn fits(&self, size_bytes: usize) -> bool {
        8.0 * size_bytes as f64 <= self.budget_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub level: usize,
    /// Number of levels kept before the cliff.
    pub candidates: usize,
    pub cliff: Option<usize>,
    /// Whether some candidate fitted the budget. When false, `level` is the
    /// smallest level of the whole space.
    pub feasible: bool,
}

/// Levels preceding the first cliff: the first `i` whose quality drop
/// exceeds `beta` times the drop before it.
pub fn candidate_levels(space: &PruningLevelSpace, beta: f64) -> (Vec<usize>, Option<usize>) {
    let q = |i: usize| space.quality(i);
    let mut s = vec![0];
    if space.len() < 2 {
        return (s, None);
    }
    let mut previous = q(0) - q(1);
    for i in 1..space.len() {
        let drop = q(i - 1) - q(i);
        let denom = if previous == 0.0 { MIN_PREVIOUS_DROP } else { previous };
        if drop / denom > beta {
            return (s, Some(i));
        }
        s.push(i);
        previous = drop;
    }
    (s, None)
}

pub fn select_pruning_level(space: &PruningLevelSpace, ctx: &SelectionContext) -> Result<Selection> {
    ctx.validate()?;
    let (s, cliff) = candidate_levels(space, ctx.cliff_beta);
    let mut found = None;
    let (mut low, mut high) = (0isize, s.len() as isize - 1);
    while low <= high {
        let mid = (low + high) / 2;
        let tmp = s[mid as usize];
        if ctx.fits(space.size(tmp)) {
            found = Some(tmp);
            high = mid - 1;
        } else {
            low = mid + 1;
        }
    }
    Ok(match found {
        Some(level) => Selection {
            level,
            candidates: s.len(),
            cliff,
            feasible: true,
        },
        None => Selection {
            // Sizes decrease strictly, so the last level is the smallest.
            level: space.len() - 1,
            candidates: s.len(),
            cliff,
            feasible: false,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IlpChoice {
    Level(usize),
    Infeasible,
}

/// Exact optimum of the per-frame selection program: maximize total quality
/// with one level per frame and each frame's size within its budget. The
/// constraints do not couple frames, so this is a per-frame argmax (lowest
/// index on ties).
pub fn ilp_optimal(spaces: &[PruningLevelSpace], ctxs: &[SelectionContext]) -> Result<Vec<IlpChoice>> {
    if spaces.len() != ctxs.len() {
        return Err(Error::structural(format!(
            "{} level spaces for {} budgets",
            spaces.len(),
            ctxs.len()
        )));
    }
    spaces
        .iter()
        .zip(ctxs)
        .map(|(sp, ctx)| {
            ctx.validate()?;
            let mut best: Option<usize> = None;
            for j in 0..sp.len() {
                if ctx.fits(sp.size(j)) && best.is_none_or(|b| sp.quality(j) > sp.quality(b)) {
                    best = Some(j);
                }
            }
            Ok(best.map_or(IlpChoice::Infeasible, IlpChoice::Level))
        })
        .collect()
}

/// Entry indices of `delta` from first to last pruned: lowest usage first,
/// higher primitive index first on ties.
pub fn pruning_order(delta: &DeltaTensor, usage: &UsageFrequency) -> Result<Vec<u32>> {
    if usage.counts.len() != delta.base_count() {
        return Err(Error::structural(format!(
            "usage covers {} primitives, delta {}",
            usage.counts.len(),
            delta.base_count()
        )));
    }
    let mut idx: Vec<u32> = delta.indices().collect();
    idx.sort_by(|&a, &b| usage.counts[a as usize].cmp(&usage.counts[b as usize]).then(b.cmp(&a)));
    Ok(idx)
}

/// Quantized form of `delta`, as the client would decode it.
pub fn transmitted(delta: &DeltaTensor, quant_step: f64) -> Result<DeltaTensor> {
    Ok(decode_delta(encode_delta(delta, quant_step, 0, 0)?.bytes())?.1)
}

/// Prunes `delta` (which applies to `base`) at each ratio and measures the
/// result. Quality is the mean PSNR over `cams` of the pruned reconstruction
/// against the unpruned one; size is the encoded payload length. A level
/// whose size equals the previous kept level is dropped.
#[allow(clippy::too_many_arguments)]
pub fn build_level_space(
    delta: &DeltaTensor,
    base: &GaussianFrame,
    cams: &[Camera],
    ratios: &[f64],
    usage: &UsageFrequency,
    quant_step: f64,
    frame_index: u32,
) -> Result<PruningLevelSpace> {
    if ratios.first() != Some(&0.0) {
        return Err(Error::validation("pruning ratios must start at 0"));
    }
    if ratios.windows(2).any(|w| !(w[1] > w[0])) || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::validation("pruning ratios must increase strictly within [0, 1]"));
    }
    if cams.is_empty() {
        return Err(Error::validation("level space needs evaluation cameras"));
    }
    let order = pruning_order(delta, usage)?;
    let reference_frame = apply_to_frame(base, &transmitted(delta, quant_step)?)?;
    let reference = exec::map(cams, |c| render(&reference_frame, c))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let e = order.len();
    let levels = exec::map(ratios, |&r| -> Result<PruningLevel> {
        let k = ((r * e as f64).round() as usize).min(e);
        let pruned = order[..k].to_vec();
        let kept = delta.without(&pruned);
        let payload = encode_delta(&kept, quant_step, frame_index, 0)?;
        let frame = apply_to_frame(base, &decode_delta(payload.bytes())?.1)?;
        let mut q = 0.0;
        for (c, img) in cams.iter().zip(&reference) {
            q += metrics::psnr(&render(&frame, c)?, img)?;
        }
        Ok(PruningLevel {
            ratio: r,
            quality_db: q / cams.len() as f64,
            size_bytes: payload.payload_bytes(),
            pruned,
        })
    });
    let mut out: Vec<PruningLevel> = Vec::with_capacity(levels.len());
    for l in levels {
        let l = l?;
        if out.last().is_none_or(|p| l.size_bytes < p.size_bytes) {
            out.push(l);
        }
    }
    PruningLevelSpace::new(frame_index, out)
}

/// CSV rows `frame,ratio,quality_db,size_bytes`.
pub fn write_level_spaces_csv<W: Write>(w: W, spaces: &[PruningLevelSpace]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame", "ratio", "quality_db", "size_bytes"])
        .map_err(csv_err)?;
    for sp in spaces {
        for l in sp.levels() {
            out.write_record([
                sp.frame_index.to_string(),
                format!("{:.4}", l.ratio),
                format!("{:.6}", l.quality_db),
                l.size_bytes.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{diff_frames, ShDegree};
    use crate::render::render_with_usage;
    use crate::synth::{camera_rig, generate_scene, RigSpec, SceneSpec};

    fn ctx(bits_per_frame: f64) -> SelectionContext {
        SelectionContext {
            bandwidth_bps: bits_per_frame * 30.0,
            target_rate: 30.0,
            cliff_beta: 2.0,
        }
    }

    #[test]
    fn hand_traced_cliff() {
        let sp = PruningLevelSpace::from_tuples(0, &[(40.0, 500), (39.0, 400), (38.0, 300), (30.0, 200), (20.0, 100)]).unwrap();
        let (s, cliff) = candidate_levels(&sp, 2.0);
        assert_eq!(s, vec![0, 1, 2]);
        assert_eq!(cliff, Some(3));
        // Budget below every candidate: fall back to the smallest level.
        let sel = select_pruning_level(&sp, &ctx(8.0 * 250.0)).unwrap();
        assert_eq!((sel.level, sel.feasible), (4, false));
        let sel = select_pruning_level(&sp, &ctx(8.0 * 300.0)).unwrap();
        assert_eq!((sel.level, sel.feasible, sel.candidates), (2, true, 3));
    }

    #[test]
    fn ample_budget_means_no_pruning() {
        let sp = PruningLevelSpace::from_tuples(0, &[(100.0, 900), (50.0, 400), (45.0, 100)]).unwrap();
        assert_eq!(select_pruning_level(&sp, &ctx(8.0 * 900.0)).unwrap().level, 0);
        let inf = SelectionContext {
            bandwidth_bps: f64::INFINITY,
            ..ctx(1.0)
        };
        assert_eq!(select_pruning_level(&sp, &inf).unwrap().level, 0);
    }

    #[test]
    fn zero_previous_drop_is_guarded() {
        let sp = PruningLevelSpace::from_tuples(0, &[(50.0, 30), (50.0, 20), (49.0, 10)]).unwrap();
        let (s, cliff) = candidate_levels(&sp, 2.0);
        assert_eq!((s, cliff), (vec![0, 1], Some(2)));
    }

    #[test]
    fn bad_spaces_are_rejected() {
        assert!(PruningLevelSpace::from_tuples(0, &[]).is_err());
        assert!(PruningLevelSpace::from_tuples(0, &[(1.0, 10), (0.5, 10)]).is_err());
        let bad = SelectionContext {
            cliff_beta: 0.0,
            ..ctx(10.0)
        };
        let sp = PruningLevelSpace::from_tuples(0, &[(1.0, 10)]).unwrap();
        assert!(select_pruning_level(&sp, &bad).is_err());
    }

    #[test]
    fn ilp_simple_cases() {
        let sp = PruningLevelSpace::from_tuples(0, &[(60.0, 300), (50.0, 200), (40.0, 100)]).unwrap();
        assert_eq!(ilp_optimal(std::slice::from_ref(&sp), &[ctx(800.0)]).unwrap(), vec![IlpChoice::Level(2)]);
        assert_eq!(ilp_optimal(std::slice::from_ref(&sp), &[ctx(1e9)]).unwrap(), vec![IlpChoice::Level(0)]);
        assert_eq!(ilp_optimal(std::slice::from_ref(&sp), &[ctx(10.0)]).unwrap(), vec![IlpChoice::Infeasible]);
        assert!(ilp_optimal(&[sp], &[]).is_err());
    }

    /// Spaces with strictly decreasing sizes and arbitrary (or decreasing)
    /// qualities.
    fn random_space(rng: &mut ChaCha8Rng, decreasing: bool) -> PruningLevelSpace {
        let n = rng.gen_range(2..12);
        let mut size = rng.gen_range(2000..5000usize);
        let mut q = 100.0;
        let tuples: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                if i > 0 {
                    size -= rng.gen_range(1..150);
                    q -= if decreasing {
                        rng.gen_range(0.01..10.0)
                    } else {
                        rng.gen_range(-2.0..10.0)
                    };
                }
                (q, size)
            })
            .collect();
        PruningLevelSpace::from_tuples(0, &tuples).unwrap()
    }

    #[test]
    fn ilp_equals_full_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let frames = rng.gen_range(1..=5);
            let spaces: Vec<_> = (0..frames)
                .map(|_| {
                    let n = rng.gen_range(1..=6);
                    let mut size = 1000usize;
                    let t: Vec<(f64, usize)> = (0..n)
                        .map(|_| {
                            size -= rng.gen_range(1..150);
                            (rng.gen_range(20.0..60.0f64).round(), size)
                        })
                        .collect();
                    PruningLevelSpace::from_tuples(0, &t).unwrap()
                })
                .collect();
            let ctxs: Vec<_> = (0..frames).map(|_| ctx(8.0 * rng.gen_range(300.0..1000.0))).collect();
            let got = ilp_optimal(&spaces, &ctxs).unwrap();
            // Enumerate every joint selection, keeping the first maximum in
            // lexicographic order.
            let dims: Vec<usize> = spaces.iter().map(|s| s.len()).collect();
            let total: usize = dims.iter().product();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mut code in 0..total {
                let mut pick = vec![0; frames];
                for f in (0..frames).rev() {
                    pick[f] = code % dims[f];
                    code /= dims[f];
                }
                // Every frame must be feasible; infeasible frames are left
                // out of the program.
                let feasible_frames: Vec<usize> = (0..frames).filter(|&f| (0..dims[f]).any(|j| ctxs[f].fits(spaces[f].size(j)))).collect();
                if feasible_frames.iter().any(|&f| !ctxs[f].fits(spaces[f].size(pick[f]))) {
                    continue;
                }
                if (0..frames).any(|f| !feasible_frames.contains(&f) && pick[f] != 0) {
                    continue;
                }
                let q: f64 = feasible_frames.iter().map(|&f| spaces[f].quality(pick[f])).sum();
                if best.as_ref().is_none_or(|(bq, _)| q > *bq) {
                    best = Some((q, pick));
                }
            }
            let (_, pick) = best.unwrap();
            for f in 0..frames {
                match got[f] {
                    IlpChoice::Level(j) => assert_eq!(j, pick[f]),
                    IlpChoice::Infeasible => assert!((0..dims[f]).all(|j| !ctxs[f].fits(spaces[f].size(j)))),
                }
            }
        }
    }

    /// Straightforward restatement used as the reference.
    fn linear_reference(sp: &PruningLevelSpace, c: &SelectionContext) -> usize {
        let q: Vec<f64> = (0..sp.len()).map(|i| sp.quality(i)).collect();
        let mut s = vec![0];
        let mut prev = if q.len() > 1 { q[0] - q[1] } else { 0.0 };
        for i in 1..q.len() {
            let d = q[i - 1] - q[i];
            let p = if prev == 0.0 { 1e-12 } else { prev };
            if d > c.cliff_beta * p && p > 0.0 || (p < 0.0 && d / p > c.cliff_beta) {
                break;
            }
            s.push(i);
            prev = d;
        }
        s.into_iter().find(|&i| 8.0 * sp.size(i) as f64 <= c.budget_bits()).unwrap_or(sp.len() - 1)
    }

    #[test]
    fn matches_linear_reference_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..1000 {
            let sp = random_space(&mut rng, k % 2 == 0);
            let c = ctx(8.0 * rng.gen_range(1500.0..5200.0));
            let sel = select_pruning_level(&sp, &c).unwrap();
            assert_eq!(sel.level, linear_reference(&sp, &c));
            if sel.feasible {
                assert!(c.fits(sp.size(sel.level)));
                if k % 2 == 0 {
                    assert_eq!(ilp_optimal(std::slice::from_ref(&sp), &[c]).unwrap()[0], IlpChoice::Level(sel.level));
                }
            }
        }
    }

    fn cliff_scene() -> (GaussianFrame, GaussianFrame, Vec<Camera>) {
        let cams = camera_rig(&RigSpec::default()).unwrap();
        let spec = SceneSpec {
            primitives: 60,
            frames: 2,
            mover_fraction: 0.5,
            motion_step: 0.05,
            ..Default::default()
        };
        let f = generate_scene(&spec, 4).unwrap();
        (f[0].clone(), f[1].clone(), cams)
    }

    #[test]
    fn level_space_endpoints_and_monotonicity() {
        let (a, b, cams) = cliff_scene();
        let d = diff_frames(&a, &b).unwrap();
        let (_, usage) = render_with_usage(&b, &cams).unwrap();
        let ratios: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let sp = build_level_space(&d, &a, &cams, &ratios, &usage, 1e-3, 1).unwrap();
        assert_eq!(sp.quality(0), metrics::PSNR_CAP_DB);
        assert_eq!(sp.size(0), encode_delta(&d, 1e-3, 1, 0).unwrap().payload_bytes());
        let last = sp.levels().last().unwrap();
        assert_eq!(last.ratio, 1.0);
        assert_eq!(last.size_bytes, crate::codec::DELTA_HEADER_BYTES);
        for w in sp.levels().windows(2) {
            assert!(w[1].quality_db <= w[0].quality_db + 0.05, "{} -> {}", w[0].quality_db, w[1].quality_db);
        }
        let mut buf = Vec::new();
        write_level_spaces_csv(&mut buf, std::slice::from_ref(&sp)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("frame,ratio,quality_db,size_bytes\n"));
        assert_eq!(text.lines().count(), sp.len() + 1);
        assert!(build_level_space(&d, &a, &cams, &[0.5], &usage, 1e-3, 1).is_err());
    }

    #[test]
    fn low_usage_pruning_beats_high_usage_pruning() {
        let (a, b, cams) = cliff_scene();
        let d = diff_frames(&a, &b).unwrap();
        let (_, usage) = render_with_usage(&b, &cams).unwrap();
        let order = pruning_order(&d, &usage).unwrap();
        let reference = apply_to_frame(&a, &transmitted(&d, 1e-3).unwrap()).unwrap();
        let quality = |removed: &[u32]| {
            let f = apply_to_frame(&a, &transmitted(&d.without(removed), 1e-3).unwrap()).unwrap();
            cams.iter()
                .map(|c| metrics::psnr(&render(&f, c).unwrap(), &render(&reference, c).unwrap()).unwrap())
                .sum::<f64>()
                / cams.len() as f64
        };
        for k in [3, 8, 15] {
            let low = quality(&order[..k]);
            let high = quality(&order[order.len() - k..]);
            assert!(low + 0.05 >= high, "k={k}: low {low} high {high}");
        }
        // Ties go to the higher index first.
        let mut tie = DeltaTensor::empty(3, ShDegree::ZERO);
        for i in 0..3 {
            let mut blk = vec![0.0; 17];
            blk[0] = 0.1;
            tie.insert(i, blk).unwrap();
        }
        let u = UsageFrequency { counts: vec![5, 5, 1] };
        assert_eq!(pruning_order(&tie, &u).unwrap(), vec![2, 1, 0]);
    }

    proptest! {
        #[test]
        fn prop_budget_safety(seed in 0u64..5000, bits in 100.0f64..50_000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sp = random_space(&mut rng, seed % 2 == 0);
            let c = ctx(bits);
            let sel = select_pruning_level(&sp, &c).unwrap();
            let (s, _) = candidate_levels(&sp, c.cliff_beta);
            if s.iter().any(|&i| c.fits(sp.size(i))) {
                prop_assert!(sel.feasible && c.fits(sp.size(sel.level)));
            } else {
                prop_assert_eq!(sel.level, sp.len() - 1);
            }
        }
    }
}
