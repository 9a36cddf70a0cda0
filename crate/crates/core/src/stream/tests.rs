use super::*;
use crate::synth::{camera_rig, generate_scene, RigSpec, SceneSpec};

const INF: f64 = f64::INFINITY;

fn setup(frames: usize, keys: &[u32]) -> (Grouping, Vec<Camera>) {
    let spec = SceneSpec {
        primitives: 50,
        frames,
        mover_fraction: 0.3,
        motion_step: 0.03,
        ..Default::default()
    };
    let f = generate_scene(&spec, 11).unwrap();
    let rig = RigSpec {
        cameras: 2,
        width: 48,
        height: 48,
        focal: 55.0,
        ..Default::default()
    };
    (Grouping::from_frames(&f, keys).unwrap(), camera_rig(&rig).unwrap())
}

fn max_abs_diff(a: &DeltaTensor, b: &DeltaTensor) -> f64 {
    a.to_dense()
        .iter()
        .zip(b.to_dense())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn trace_lookup_and_parsing() {
    let tr = BandwidthTrace::from_csv("time_s,bandwidth_mbps\n0,5\n1.5,20\n3,20\n".as_bytes()).unwrap();
    assert_eq!(tr.bandwidth_at(0.0).unwrap(), 5e6);
    assert_eq!(tr.bandwidth_at(1.49).unwrap(), 5e6);
    assert_eq!(tr.bandwidth_at(1.5).unwrap(), 20e6);
    assert_eq!(tr.bandwidth_at(3.0).unwrap(), 20e6);
    assert!(matches!(tr.bandwidth_at(3.01), Err(Error::TraceExhausted { .. })));
    assert!(tr.bandwidth_at(-1.0).is_err());
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    assert_eq!(BandwidthTrace::from_csv(buf.as_slice()).unwrap(), tr);
    assert_eq!(tr.scaled(0.5).unwrap().bandwidth_at(2.0).unwrap(), 10e6);
    assert!(BandwidthTrace::from_csv("time_s,bandwidth_mbps\n0,5\n0,6\n".as_bytes()).is_err());
    assert!(BandwidthTrace::from_csv("time_s,bandwidth_mbps\n0,-1\n".as_bytes()).is_err());
    assert!(BandwidthTrace::from_csv("time_s,bandwidth_mbps\n".as_bytes()).is_err());
    let inf = BandwidthTrace::from_csv("time_s,bandwidth_mbps\n0,inf\n1,inf\n".as_bytes()).unwrap();
    assert_eq!(inf.bandwidth_at(0.5).unwrap(), INF);
}

#[test]
fn unlimited_bandwidth_sends_everything() {
    let (g, cams) = setup(8, &[0]);
    let cfg = SessionConfig::default();
    let run = run_session(&g, &cams, &BandwidthTrace::constant(INF, 1.0).unwrap(), &cfg).unwrap();
    let key = client_reconstruct(&run.transcript[0]).unwrap();
    let mut received = Vec::new();
    let mut state = SessionState::new();
    for (t, row) in run.report.rows.iter().enumerate() {
        assert_eq!(row.pruning_ratio, 0.0, "frame {t}");
        assert_eq!(row.stall_s, 0.0);
        assert!(!row.fallback);
        assert!(row.client_psnr_db > 50.0, "frame {t}: {}", row.client_psnr_db);
        received.extend(run.transcript[t].iter().cloned());
        // The client holds the decoded keyframe plus D_t, up to one
        // quantization step of the last residual.
        let client = client_reconstruct(&received).unwrap();
        let expect = apply_to_frame(&key, &g.cumulative(t).unwrap()).unwrap();
        let gap = diff_frames_abs(&client, &expect);
        assert!(gap <= cfg.quant_step / 2.0 + 1e-12, "frame {t}: {gap}");
        let (_, next, _) = step_frame(&state, &g, &cams, t as u32, INF, &cfg).unwrap();
        state = next;
        let d_true = g.cumulative(t).unwrap();
        assert!(max_abs_diff(&d_true, state.d_sent.as_ref().unwrap()) <= cfg.quant_step / 2.0 + 1e-12);
    }
}

fn diff_frames_abs(a: &GaussianFrame, b: &GaussianFrame) -> f64 {
    a.flat_params()
        .iter()
        .zip(b.flat_params())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn residual_recovers_pruned_variation() {
    let (g, cams) = setup(10, &[0]);
    let cfg = SessionConfig::default();
    let recover = 6u32;
    let period = 1.0 / cfg.target_rate;
    let starved = BandwidthTrace::two_phase(1.0, INF, (recover as f64 - 0.5) * period, 1.0).unwrap();
    let pruned = run_session(&g, &cams, &starved, &cfg).unwrap().report;
    let clean = run_session(&g, &cams, &BandwidthTrace::constant(INF, 1.0).unwrap(), &cfg).unwrap().report;
    for t in 1..recover as usize {
        let r = &pruned.rows[t];
        assert_eq!(r.pruning_ratio, 1.0, "frame {t}");
        assert!(r.fallback);
        assert_eq!(r.sent_bytes, crate::codec::DELTA_HEADER_BYTES);
    }
    assert!(pruned.rows[recover as usize - 1].client_psnr_db < clean.rows[recover as usize - 1].client_psnr_db - 5.0);
    for t in recover as usize..10 {
        let gap = (pruned.rows[t].client_psnr_db - clean.rows[t].client_psnr_db).abs();
        assert!(gap <= 0.2, "frame {t}: {gap}");
    }
}

#[test]
fn accumulator_gap_is_exactly_what_was_pruned() {
    let (g, cams) = setup(6, &[0]);
    let cfg = SessionConfig::default();
    let mut state = SessionState::new();
    for t in 0..6u32 {
        // Moderate budget: some frames prune, some do not.
        let (payloads, next, _) = step_frame(&state, &g, &cams, t, 8.0 * 30.0 * 900.0, &cfg).unwrap();
        if t > 0 {
            let residual = g.cumulative(t as usize).unwrap().sub(state.d_sent.as_ref().unwrap()).unwrap();
            let Payload::Delta { bytes } = payloads.last().unwrap() else { panic!("delta expected") };
            let (_, sent) = decode_delta(bytes).unwrap();
            let left = next.d_true.as_ref().unwrap().sub(next.d_sent.as_ref().unwrap()).unwrap();
            // What stays behind is the residual minus what was sent.
            assert_eq!(left, residual.sub(&sent).unwrap());
            for i in sent.indices() {
                let l = left.get(i).map_or(0.0, |b| b.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                assert!(l <= cfg.quant_step / 2.0 + 1e-12);
            }
        }
        state = next;
    }
}

#[test]
fn seeking_needs_one_delta() {
    let (g, cams) = setup(10, &[0, 5]);
    let cfg = SessionConfig::default();
    let run = run_session(&g, &cams, &BandwidthTrace::constant(INF, 1.0).unwrap(), &cfg).unwrap();
    let sequential = client_reconstruct(&run.transcript.concat()).unwrap();
    let (payloads, _, info) = step_frame(&SessionState::new(), &g, &cams, 9, INF, &cfg).unwrap();
    assert!(info.keyframe_sent);
    assert_eq!(payloads.len(), 2);
    let jumped = client_reconstruct(&payloads).unwrap();
    assert!(diff_frames_abs(&jumped, &sequential) <= cfg.quant_step + 1e-12);
    assert_eq!(jumped.group_key, 5);

    // Skipping inside a group sends one delta and no keyframe.
    let mut state = SessionState::new();
    let mut rx = Vec::new();
    for t in 0..=2 {
        let (p, next, _) = step_frame(&state, &g, &cams, t, INF, &cfg).unwrap();
        rx.extend(p);
        state = next;
    }
    let (p, _, info) = step_frame(&state, &g, &cams, 4, INF, &cfg).unwrap();
    assert!(!info.keyframe_sent);
    assert_eq!(p.len(), 1);
    rx.extend(p);
    let expect = client_reconstruct(&run.transcript[..=4].concat()).unwrap();
    assert!(diff_frames_abs(&client_reconstruct(&rx).unwrap(), &expect) <= cfg.quant_step + 1e-12);
}

#[test]
fn delta_order_does_not_matter() {
    let (g, cams) = setup(7, &[0]);
    let run = run_session(&g, &cams, &BandwidthTrace::constant(INF, 1.0).unwrap(), &SessionConfig::default()).unwrap();
    let all = run.transcript.concat();
    let mut shuffled = all.clone();
    shuffled[1..].reverse();
    shuffled[1..].rotate_left(2);
    let a = client_reconstruct(&all).unwrap();
    let b = client_reconstruct(&shuffled).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    // Keyframe only renders the keyframe.
    let k = client_reconstruct(&all[..1]).unwrap();
    assert!(metrics::psnr(&render(&k, &cams[0]).unwrap(), &render(g.spaces[0].frame(), &cams[0]).unwrap()).unwrap() > 50.0);
}

#[test]
fn protocol_errors() {
    let (g, cams) = setup(6, &[0, 3]);
    let cfg = SessionConfig::default();
    let run = run_session(&g, &cams, &BandwidthTrace::constant(INF, 1.0).unwrap(), &cfg).unwrap();
    assert!(matches!(client_reconstruct(&[]), Err(Error::Protocol(_))));
    assert!(matches!(client_reconstruct(&run.transcript[1]), Err(Error::Protocol(_))));
    // A delta of group 3 on top of keyframe 0.
    let mixed = [run.transcript[0].clone(), run.transcript[4].clone()].concat();
    assert!(matches!(client_reconstruct(&mixed), Err(Error::Protocol(_))));
}

#[test]
fn reports_are_consistent_and_deterministic() {
    let (g, cams) = setup(8, &[0, 4]);
    let cfg = SessionConfig::default();
    let tr = BandwidthTrace::new(vec![
        TraceSample { time_s: 0.0, bandwidth_bps: 2e6 },
        TraceSample { time_s: 0.1, bandwidth_bps: 2e5 },
        TraceSample { time_s: 1.0, bandwidth_bps: 2e5 },
    ])
    .unwrap();
    let a = run_session(&g, &cams, &tr, &cfg).unwrap();
    let b = run_session(&g, &cams, &tr, &cfg).unwrap();
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    let r = &a.report;
    assert_eq!(r.aggregates, Aggregates::from_rows(&r.rows));
    let bytes: usize = a.transcript.iter().flatten().map(Payload::byte_len).sum();
    assert_eq!(r.aggregates.total_bytes, bytes);
    assert_eq!(r.rows.iter().map(|x| x.sent_bytes).sum::<usize>(), bytes);
    for row in &r.rows {
        if !row.keyframe && !row.fallback {
            assert!(8.0 * row.sent_bytes as f64 <= row.bandwidth_bps / cfg.target_rate, "frame {}", row.frame);
        }
        assert_eq!(row.stall_s, (row.transmission_time_s - 1.0 / cfg.target_rate).max(0.0));
    }
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    for k in ["rows", "aggregates", "target_rate"] {
        assert!(json.get(k).is_some());
    }
    let mut csv_rows = Vec::new();
    r.write_rows_csv(&mut csv_rows).unwrap();
    assert_eq!(String::from_utf8(csv_rows).unwrap().lines().count(), r.rows.len() + 1);
    let mut cdf = Vec::new();
    r.write_cdf_csv(&mut cdf).unwrap();
    let cdf = String::from_utf8(cdf).unwrap();
    assert!(cdf.starts_with("percentile,transmission_time_s\np50,"));
    assert!(cdf.contains("\nmax,"));
}

#[test]
fn fast_link_never_stalls() {
    let (g, cams) = setup(6, &[0]);
    let run = run_session(&g, &cams, &BandwidthTrace::constant(100e6, 1.0).unwrap(), &SessionConfig::default()).unwrap();
    for row in &run.report.rows {
        assert!(row.sent_bytes <= 400_000);
        assert_eq!(row.stall_s, 0.0);
    }
    assert_eq!(run.report.aggregates.stalled_frames, 0);
}

#[test]
fn halving_bandwidth_doubles_unchanged_frames() {
    let (g, cams) = setup(8, &[0]);
    let cfg = SessionConfig::default();
    let tr = BandwidthTrace::constant(8.0 * 30.0 * 1500.0, 1.0).unwrap();
    let full = run_session(&g, &cams, &tr, &cfg).unwrap().report;
    let half = run_session(&g, &cams, &tr.scaled(0.5).unwrap(), &cfg).unwrap().report;
    let mut shortened = 0;
    for (a, b) in full.rows.iter().zip(&half.rows) {
        if a.keyframe || a.sent_bytes == b.sent_bytes {
            assert_eq!(b.transmission_time_s, 2.0 * a.transmission_time_s, "frame {}", a.frame);
        }
        if b.transmission_time_s < a.transmission_time_s {
            // Only possible by dropping to a level under half the size.
            assert!(2 * b.sent_bytes < a.sent_bytes);
            shortened += 1;
        }
    }
    // With a coarse level space the smaller budget can jump to a much
    // cheaper level, so a frame may get faster.
    assert!(shortened > 0);
}

#[test]
fn short_trace_is_exhausted() {
    let (g, cams) = setup(6, &[0]);
    let tr = BandwidthTrace::constant(1e6, 0.1).unwrap();
    assert!(matches!(
        run_session(&g, &cams, &tr, &SessionConfig::default()),
        Err(Error::TraceExhausted { .. })
    ));
}

#[test]
fn percentiles_nearest_rank() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    let p = Percentiles::of(&v);
    assert_eq!((p.p50, p.p90, p.p95, p.p99, p.max), (50.0, 90.0, 95.0, 99.0, 100.0));
    assert_eq!(Percentiles::of(&[3.0]).p50, 3.0);
}
