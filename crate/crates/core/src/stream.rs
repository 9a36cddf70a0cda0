//! Trace-driven streaming session.
//!
//! The server keeps two accumulators per group: the true variation `D_t` of
//! the current frame from its keyframe and the variation `D'` it has actually
//! delivered. Each frame sends a pruned copy of the residual `D_t - D'`, so
//! whatever an earlier frame pruned away is offered again as soon as the
//! budget allows. Time is simulated: frame `t` is sent at `t / R` and the
//! bandwidth is read from the trace at that instant.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_delta, decode_frame, encode_delta, encode_frame, AttributeImageSet};
use crate::error::{Error, Result};
use crate::grouping::Grouping;
use crate::metrics;
use crate::model::{apply_delta, apply_to_frame, DeltaTensor, GaussianFrame};
use crate::prune::{build_level_space, csv_err, select_pruning_level, PruningLevelSpace, SelectionContext};
use crate::render::{render, render_with_usage, Camera};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub time_s: f64,
    pub bandwidth_bps: f64,
}

/// Piecewise-constant bandwidth. Each sample holds until the next one; the
/// last sample marks the end of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    samples: Vec<TraceSample>,
}

#[derive(Deserialize, Serialize)]
struct TraceRow {
    time_s: f64,
    bandwidth_mbps: f64,
}

impl BandwidthTrace {
    pub fn new(samples: Vec<TraceSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("bandwidth trace is empty"));
        }
        for s in &samples {
            if !s.time_s.is_finite() || !(s.bandwidth_bps > 0.0) {
                return Err(Error::validation(format!(
                    "bad trace sample at t={}: bandwidth {}",
                    s.time_s, s.bandwidth_bps
                )));
            }
        }
        if samples.windows(2).any(|w| !(w[1].time_s > w[0].time_s)) {
            return Err(Error::validation("trace times must increase strictly"));
        }
        Ok(BandwidthTrace { samples })
    }

    pub fn constant(bandwidth_bps: f64, duration_s: f64) -> Result<Self> {
        BandwidthTrace::new(vec![
            TraceSample { time_s: 0.0, bandwidth_bps },
            TraceSample { time_s: duration_s, bandwidth_bps },
        ])
    }

    /// `low` until `switch_s`, then `high` until `end_s`.
    pub fn two_phase(low_bps: f64, high_bps: f64, switch_s: f64, end_s: f64) -> Result<Self> {
        BandwidthTrace::new(vec![
            TraceSample { time_s: 0.0, bandwidth_bps: low_bps },
            TraceSample { time_s: switch_s, bandwidth_bps: high_bps },
            TraceSample { time_s: end_s, bandwidth_bps: high_bps },
        ])
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time_s)
    }

    pub fn bandwidth_at(&self, t: f64) -> Result<f64> {
        let end = self.end_time();
        if !(t >= self.samples[0].time_s) || t > end {
            return Err(Error::TraceExhausted { at: t, end });
        }
        let i = self.samples.partition_point(|s| s.time_s <= t);
        Ok(self.samples[i - 1].bandwidth_bps)
    }

    /// Every bandwidth multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        BandwidthTrace::new(
            self.samples
                .iter()
                .map(|s| TraceSample {
                    time_s: s.time_s,
                    bandwidth_bps: s.bandwidth_bps * factor,
                })
                .collect(),
        )
    }

    /// CSV with header `time_s,bandwidth_mbps`.
    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for row in rd.deserialize::<TraceRow>() {
            let row = row.map_err(|e| Error::validation(format!("trace row: {e}")))?;
            samples.push(TraceSample {
                time_s: row.time_s,
                bandwidth_bps: row.bandwidth_mbps * 1e6,
            });
        }
        BandwidthTrace::new(samples)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        BandwidthTrace::from_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.samples {
            out.serialize(TraceRow {
                time_s: s.time_s,
                bandwidth_mbps: s.bandwidth_bps / 1e6,
            })
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub target_rate: f64,
    pub cliff_beta: f64,
    pub ratios: Vec<f64>,
    pub quant_step: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            target_rate: 30.0,
            cliff_beta: 2.0,
            ratios: (0..=10).map(|i| i as f64 / 10.0).collect(),
            quant_step: 1e-4,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection(1.0).validate()?;
        if !(self.quant_step > 0.0) || !self.quant_step.is_finite() {
            return Err(Error::validation("quantization step must be positive and finite"));
        }
        Ok(())
    }

    fn selection(&self, bandwidth_bps: f64) -> SelectionContext {
        SelectionContext {
            bandwidth_bps,
            target_rate: self.target_rate,
            cliff_beta: self.cliff_beta,
        }
    }
}

/// What goes over the wire. A keyframe carries its frame index as framing
/// next to the attribute-image bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Keyframe { key: u32, bytes: Vec<u8> },
    Delta { bytes: Vec<u8> },
}

impl Payload {
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Keyframe { bytes, .. } | Payload::Delta { bytes } => bytes.len(),
        }
    }
}

/// Server bookkeeping for the group being streamed.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub group: Option<usize>,
    /// True variation of the last sent frame from its keyframe.
    pub d_true: Option<DeltaTensor>,
    /// Variation delivered so far in this group, as the client decoded it.
    pub d_sent: Option<DeltaTensor>,
    pub cursor: Option<u32>,
}

impl SessionState {
    pub fn new() -> Self {
        SessionState {
            group: None,
            d_true: None,
            d_sent: None,
            cursor: None,
        }
    }
}

impl Default for SessionState {
    fn default() -> Self {
        SessionState::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub keyframe_sent: bool,
    /// Chosen pruning level and its ratio; `None` when no delta was sent.
    pub level: Option<(usize, f64)>,
    /// Nothing before the cliff fitted the budget.
    pub fallback: bool,
    /// Level space the choice was made from.
    pub levels: Option<PruningLevelSpace>,
}

/// Sends frame `t`. Entering a new group transmits its keyframe and resets
/// both accumulators; any other frame transmits the pruned residual.
pub fn step_frame(
    state: &SessionState,
    grouping: &Grouping,
    cams: &[Camera],
    t: u32,
    bandwidth_bps: f64,
    cfg: &SessionConfig,
) -> Result<(Vec<Payload>, SessionState, StepInfo)> {
    let g = grouping
        .plan
        .group_of(t)
        .ok_or_else(|| Error::structural(format!("frame {t} outside the plan")))?;
    let space = &grouping.spaces[g];
    let key = grouping.plan.groups[g].key;
    let mut payloads = Vec::new();
    let mut next = state.clone();
    let keyframe_sent = state.group != Some(g);
    if keyframe_sent {
        payloads.push(Payload::Keyframe {
            key,
            bytes: encode_frame(space.frame())?.to_bytes(),
        });
        next.group = Some(g);
        next.d_true = Some(space.empty_delta());
        next.d_sent = Some(space.empty_delta());
    }
    next.cursor = Some(t);
    let mut info = StepInfo {
        keyframe_sent,
        level: None,
        fallback: false,
        levels: None,
    };
    if t == key {
        next.d_true = Some(space.empty_delta());
        return Ok((payloads, next, info));
    }
    let d_true = grouping.cumulative(t as usize)?;
    let d_sent = next.d_sent.take().unwrap_or_else(|| space.empty_delta());
    let residual = d_true.sub(&d_sent)?;
    let base = apply_delta(space, &d_sent)?;
    let server = apply_delta(space, &d_true)?;
    let (_, usage) = render_with_usage(&server, cams)?;
    let levels = build_level_space(&residual, &base, cams, &cfg.ratios, &usage, cfg.quant_step, t)?;
    let sel = select_pruning_level(&levels, &cfg.selection(bandwidth_bps))?;
    let chosen = levels.levels()[sel.level].clone();
    let payload = encode_delta(&residual.without(&chosen.pruned), cfg.quant_step, t, key)?;
    let (_, delivered) = decode_delta(payload.bytes())?;
    next.d_sent = Some(d_sent.add(&delivered)?);
    next.d_true = Some(d_true);
    info.level = Some((sel.level, chosen.ratio));
    info.fallback = !sel.feasible;
    info.levels = Some(levels);
    payloads.push(Payload::Delta {
        bytes: payload.bytes().to_vec(),
    });
    Ok((payloads, next, info))
}

/// Receiving side: the last keyframe plus every delta received after it.
#[derive(Debug, Clone, Default)]
pub struct Client {
    key: Option<(u32, GaussianFrame)>,
    received: Option<DeltaTensor>,
    last_frame: u32,
}

impl Client {
    pub fn new() -> Self {
        Client::default()
    }

    pub fn receive(&mut self, p: &Payload) -> Result<()> {
        match p {
            Payload::Keyframe { key, bytes } => {
                let frame = decode_frame(&AttributeImageSet::from_bytes(bytes)?)?.with_index(*key, *key);
                self.received = Some(DeltaTensor::empty(frame.len(), frame.sh_degree()));
                self.key = Some((*key, frame));
                self.last_frame = *key;
            }
            Payload::Delta { bytes } => {
                let (key, _) = self
                    .key
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("delta received before any keyframe".into()))?;
                let (header, delta) = decode_delta(bytes)?;
                if header.base_key != *key {
                    return Err(Error::Protocol(format!(
                        "delta for frame {} references keyframe {}, client holds {}",
                        header.frame_index, header.base_key, key
                    )));
                }
                let acc = self.received.take().expect("set with the keyframe");
                self.received = Some(acc.add(&delta)?);
                self.last_frame = self.last_frame.max(header.frame_index);
            }
        }
        Ok(())
    }

    pub fn reconstruct(&self) -> Result<GaussianFrame> {
        let (key, frame) = self
            .key
            .as_ref()
            .ok_or_else(|| Error::Protocol("no keyframe received".into()))?;
        let d = self.received.as_ref().expect("set with the keyframe");
        Ok(apply_to_frame(frame, d)?.with_index(self.last_frame, *key))
    }
}

/// Reconstruction from a sequence of received payloads.
pub fn client_reconstruct(payloads: &[Payload]) -> Result<GaussianFrame> {
    let mut c = Client::new();
    for p in payloads {
        c.receive(p)?;
    }
    c.reconstruct()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: u32,
    pub keyframe: bool,
    pub sent_bytes: usize,
    pub bandwidth_bps: f64,
    pub transmission_time_s: f64,
    pub stall_s: f64,
    pub pruning_ratio: f64,
    pub level: usize,
    pub fallback: bool,
    pub client_psnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(values: &[f64]) -> Percentiles {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |p: f64| {
            if v.is_empty() {
                return 0.0;
            }
            let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
            v[rank.min(v.len()) - 1]
        };
        Percentiles {
            p50: at(50.0),
            p90: at(90.0),
            p95: at(95.0),
            p99: at(99.0),
            max: at(100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub frames: usize,
    pub total_bytes: usize,
    pub mean_transmission_s: f64,
    pub max_transmission_s: f64,
    /// Frames per minute at the mean transmission time; `None` when every
    /// transmission was instantaneous.
    pub transmission_rate_fpm: Option<f64>,
    pub total_stall_s: f64,
    pub stalled_frames: usize,
    pub mean_client_psnr_db: f64,
    pub min_client_psnr_db: f64,
    pub transmission_cdf: Percentiles,
}

impl Aggregates {
    pub fn from_rows(rows: &[FrameRecord]) -> Aggregates {
        let n = rows.len();
        let tx: Vec<f64> = rows.iter().map(|r| r.transmission_time_s).collect();
        let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
        let mean_tx = mean(tx.iter().sum());
        Aggregates {
            frames: n,
            total_bytes: rows.iter().map(|r| r.sent_bytes).sum(),
            mean_transmission_s: mean_tx,
            max_transmission_s: tx.iter().copied().fold(0.0, f64::max),
            transmission_rate_fpm: (mean_tx > 0.0).then(|| 60.0 / mean_tx),
            total_stall_s: rows.iter().map(|r| r.stall_s).sum(),
            stalled_frames: rows.iter().filter(|r| r.stall_s > 0.0).count(),
            mean_client_psnr_db: mean(rows.iter().map(|r| r.client_psnr_db).sum()),
            min_client_psnr_db: rows.iter().map(|r| r.client_psnr_db).fold(f64::INFINITY, f64::min),
            transmission_cdf: Percentiles::of(&tx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamReport {
    pub target_rate: f64,
    pub rows: Vec<FrameRecord>,
    pub aggregates: Aggregates,
}

impl StreamReport {
    pub fn from_rows(target_rate: f64, rows: Vec<FrameRecord>) -> Self {
        let aggregates = Aggregates::from_rows(&rows);
        StreamReport {
            target_rate,
            rows,
            aggregates,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Transmission-time percentile table.
    pub fn write_cdf_csv<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.aggregates.transmission_cdf;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["percentile", "transmission_time_s"]).map_err(csv_err)?;
        for (name, v) in [("p50", c.p50), ("p90", c.p90), ("p95", c.p95), ("p99", c.p99), ("max", c.max)] {
            out.write_record([name.to_string(), format!("{v:.9}")]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A finished session with every payload it sent, frame by frame.
#[derive(Debug, Clone)]
pub struct SessionRun {
    pub report: StreamReport,
    pub transcript: Vec<Vec<Payload>>,
    /// Level spaces of every delta frame, in frame order.
    pub level_spaces: Vec<PruningLevelSpace>,
}

/// Streams every frame of `grouping` in order.
pub fn run_session(grouping: &Grouping, cams: &[Camera], trace: &BandwidthTrace, cfg: &SessionConfig) -> Result<SessionRun> {
    cfg.validate()?;
    if cams.is_empty() {
        return Err(Error::validation("session needs evaluation cameras"));
    }
    let n = grouping.plan.frame_count();
    // Check coverage up front so an exhausted trace fails before any work.
    trace.bandwidth_at((n.saturating_sub(1)) as f64 / cfg.target_rate)?;
    let mut state = SessionState::new();
    let mut client = Client::new();
    let mut rows = Vec::with_capacity(n);
    let mut transcript = Vec::with_capacity(n);
    let mut level_spaces = Vec::new();
    let period = 1.0 / cfg.target_rate;
    for t in 0..n as u32 {
        let bw = trace.bandwidth_at(t as f64 * period)?;
        let (payloads, next, info) =
            step_frame(&state, grouping, cams, t, bw, cfg).map_err(|e| e.at_frame(t as usize))?;
        state = next;
        for p in &payloads {
            client.receive(p)?;
        }
        let shown = client.reconstruct()?;
        let server = grouping.reconstruct(t as usize)?;
        let mut q = 0.0;
        for c in cams {
            q += metrics::psnr(&render(&shown, c)?, &render(&server, c)?)?;
        }
        let sent: usize = payloads.iter().map(Payload::byte_len).sum();
        let tx = 8.0 * sent as f64 / bw;
        let (level, ratio) = info.level.unwrap_or((0, 0.0));
        rows.push(FrameRecord {
            frame: t,
            keyframe: info.keyframe_sent,
            sent_bytes: sent,
            bandwidth_bps: bw,
            transmission_time_s: tx,
            stall_s: (tx - period).max(0.0),
            pruning_ratio: ratio,
            level,
            fallback: info.fallback,
            client_psnr_db: q / cams.len() as f64,
        });
        log::debug!("frame {t}: {sent} B, ratio {ratio:.1}, client {:.2} dB", q / cams.len() as f64);
        transcript.push(payloads);
        level_spaces.extend(info.levels);
    }
    Ok(SessionRun {
        report: StreamReport::from_rows(cfg.target_rate, rows),
        transcript,
        level_spaces,
    })
}

#[cfg(test)]
mod tests;
