//! Quality-driven partition of a sequence into keyframe groups.
//!
//! Frames are fitted in order. A frame is first fitted as a delta on top of
//! the current group; if the mean PSNR of that fit over the evaluation
//! cameras falls below `tau`, the fit is thrown away and the frame is refitted
//! as a keyframe, opening a new group with its own canonical space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{apply_delta, compose_deltas, CanonicalSpace, DeltaTensor, GaussianFrame, ShDegree};
use crate::render::{render, Camera};
use crate::train::{fit_group_frame, fit_initial, fit_keyframe, GroundTruth, LossWeights, TrainConfig, TrainLog};

/// Frames `start..end` (end exclusive) anchored by keyframe `key == start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpan {
    pub key: u32,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub tau: f64,
    pub groups: Vec<GroupSpan>,
}

impl GroupPlan {
    /// Groups must tile `0..frame_count` in order, each starting at its key.
    pub fn validate(&self, frame_count: usize) -> Result<()> {
        let mut next = 0u32;
        for g in &self.groups {
            if g.start != next || g.key != g.start || g.end <= g.start {
                return Err(Error::structural(format!(
                    "group {:?} does not continue the partition at frame {next}",
                    g
                )));
            }
            next = g.end;
        }
        if next as usize != frame_count {
            return Err(Error::structural(format!(
                "plan covers {next} frames, sequence has {frame_count}"
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end as usize)
    }

    /// Index of the group containing frame `t`.
    pub fn group_of(&self, t: u32) -> Option<usize> {
        self.groups.iter().position(|g| g.start <= t && t < g.end)
    }

    pub fn is_key(&self, t: u32) -> bool {
        self.groups.iter().any(|g| g.key == t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: GroupPlan = serde_json::from_str(s)?;
        plan.validate(plan.frame_count())?;
        Ok(plan)
    }
}

/// Everything training produces for a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub plan: GroupPlan,
    /// One canonical space per group, in plan order.
    pub spaces: Vec<CanonicalSpace>,
    /// Per-frame motion from the previous frame of the same group; empty at
    /// keyframes.
    pub deltas: Vec<DeltaTensor>,
    /// Mean PSNR of the accepted reconstruction of each frame.
    pub psnr: Vec<f64>,
    pub logs: Vec<TrainLog>,
}

impl Grouping {
    /// Exact grouping of known frames with keyframes at `keys` (which must
    /// start with 0 and increase). Deltas are plain frame differences, so the
    /// result reproduces `frames` without any fitting.
    pub fn from_frames(frames: &[GaussianFrame], keys: &[u32]) -> Result<Self> {
        if keys.first() != Some(&0) || keys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("keys must start at 0 and increase strictly"));
        }
        if keys.last().is_some_and(|&k| k as usize >= frames.len()) {
            return Err(Error::validation("key beyond the last frame"));
        }
        let mut groups = Vec::with_capacity(keys.len());
        let mut spaces = Vec::with_capacity(keys.len());
        let mut deltas = Vec::with_capacity(frames.len());
        for (g, &k) in keys.iter().enumerate() {
            let end = keys.get(g + 1).map_or(frames.len() as u32, |&e| e);
            groups.push(GroupSpan { key: k, start: k, end });
            let key_frame = frames[k as usize].clone().with_index(k, k);
            let n = key_frame.len();
            spaces.push(CanonicalSpace::new(key_frame, n)?);
            deltas.push(DeltaTensor::empty(n, frames[k as usize].sh_degree()));
            for t in k + 1..end {
                let d = crate::model::diff_frames(&frames[t as usize - 1], &frames[t as usize])
                    .map_err(|e| e.at_frame(t as usize))?;
                deltas.push(d);
            }
        }
        let plan = GroupPlan { tau: 0.0, groups };
        plan.validate(frames.len())?;
        Ok(Grouping {
            plan,
            spaces,
            deltas,
            psnr: vec![metrics::PSNR_CAP_DB; frames.len()],
            logs: Vec::new(),
        })
    }

    /// Accumulated variation `D_t` of frame `t` relative to its keyframe.
    pub fn cumulative(&self, t: usize) -> Result<DeltaTensor> {
        let g = self
            .plan
            .group_of(t as u32)
            .ok_or_else(|| Error::structural(format!("frame {t} outside the plan")))?;
        let span = self.plan.groups[g];
        let space = &self.spaces[g];
        compose_deltas(
            space.len(),
            space.frame().sh_degree(),
            &self.deltas[span.start as usize..=t],
        )
    }

    pub fn reconstruct(&self, t: usize) -> Result<GaussianFrame> {
        let g = self.plan.group_of(t as u32).unwrap_or(0);
        let d = self.cumulative(t)?;
        Ok(apply_delta(&self.spaces[g], &d)?.with_index(t as u32, self.plan.groups[g].key))
    }
}

/// Mean over cameras of the PSNR of `apply_delta(space, delta)`.
pub fn quality_probe(space: &CanonicalSpace, delta: &DeltaTensor, target: &GroundTruth, cams: &[Camera]) -> Result<f64> {
    let frame = apply_delta(space, delta)?;
    probe_frame(&frame, target, cams)
}

fn probe_frame(frame: &GaussianFrame, target: &GroundTruth, cams: &[Camera]) -> Result<f64> {
    if cams.is_empty() || cams.len() != target.images().len() {
        return Err(Error::structural("one target image per evaluation camera required"));
    }
    let vals = crate::exec::map_range(cams.len(), |k| metrics::psnr(&render(frame, &cams[k])?, &target.images()[k]));
    Ok(vals.into_iter().sum::<Result<f64>>()? / cams.len() as f64)
}

/// Fits a whole sequence. `targets[t]` holds the images of frame `t`.
pub fn build_groups(
    targets: &[GroundTruth],
    cams: &[Camera],
    w: &LossWeights,
    cfg: &TrainConfig,
    tau: f64,
    degree: ShDegree,
) -> Result<Grouping> {
    if targets.is_empty() {
        return Err(Error::validation("sequence has no frames"));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::validation(format!("threshold {tau} must be finite and non-negative")));
    }
    let first = fit_initial(&targets[0], cams, w, cfg, degree, 0).map_err(|e| e.at_frame(0))?;
    let mut spaces = vec![first.space];
    let mut logs = vec![first.log];
    let mut groups = vec![GroupSpan {
        key: 0,
        start: 0,
        end: 1,
    }];
    let s0 = spaces.last().unwrap();
    let mut deltas = vec![s0.empty_delta()];
    let mut psnr = vec![quality_probe(s0, &deltas[0], &targets[0], cams)?];
    // Accumulated variation of the last frame inside the current group.
    let mut acc = s0.empty_delta();

    for (t, target) in targets.iter().enumerate().skip(1) {
        let space = spaces.last().unwrap();
        let fit = fit_group_frame(space, &acc, target, cams, w, cfg, t as u32).map_err(|e| e.at_frame(t))?;
        let q = probe_frame(&fit.frame, target, cams).map_err(|e| e.at_frame(t))?;
        if q >= tau {
            acc = acc.add(&fit.delta)?;
            deltas.push(fit.delta);
            psnr.push(q);
            logs.push(fit.log);
            groups.last_mut().unwrap().end = t as u32 + 1;
            continue;
        }
        let previous = apply_delta(space, &acc)?;
        let key = fit_keyframe(&previous, target, cams, w, cfg, t as u32).map_err(|e| e.at_frame(t))?;
        let empty = key.space.empty_delta();
        let q = quality_probe(&key.space, &empty, target, cams)?;
        if q < tau {
            log::warn!("keyframe {t} reaches {q:.2} dB, below threshold {tau:.2}");
        }
        spaces.push(key.space);
        logs.push(key.log);
        deltas.push(empty.clone());
        psnr.push(q);
        acc = empty;
        groups.push(GroupSpan {
            key: t as u32,
            start: t as u32,
            end: t as u32 + 1,
        });
    }
    let plan = GroupPlan { tau, groups };
    plan.validate(targets.len())?;
    Ok(Grouping {
        plan,
        spaces,
        deltas,
        psnr,
        logs,
    })
}
