//! Pipeline stages. Each reads its inputs from the output directory and
//! writes its artifacts next to them, so stages can be rerun independently.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splatstream::codec::{decode_frame, encode_frame};
use splatstream::grouping::{build_groups, Grouping};
use splatstream::model::{GaussianFrame, ShDegree};
use splatstream::prune::{ilp_optimal, select_pruning_level, write_level_spaces_csv, IlpChoice, PruningLevelSpace, SelectionContext};
use splatstream::render::{render, Camera};
use splatstream::stream::{run_session, BandwidthTrace, StreamReport};
use splatstream::synth::{camera_rig, generate_scene, RigSpec, SceneSpec};
use splatstream::train::{finite_difference_check, GroundTruth, LossMode, LossWeights};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const SCENE_FILE: &str = "scene/scene.json";
pub const GROUPING_FILE: &str = "train/grouping.json";
pub const PLAN_FILE: &str = "train/plan.json";
pub const TRAIN_LOG_FILE: &str = "train/logs.json";
pub const STREAM_REPORT_FILE: &str = "stream/report.json";
pub const STREAM_ROWS_FILE: &str = "stream/frames.csv";
pub const STREAM_CDF_FILE: &str = "stream/transmission_cdf.csv";
pub const LEVELS_FILE: &str = "stream/levels.csv";
pub const QUALITY_CURVE_FILE: &str = "report/quality_vs_pruning.csv";
pub const PSNR_FILE: &str = "report/per_frame_psnr.csv";
pub const CDF_FILE: &str = "report/transmission_cdf.csv";
pub const SUMMARY_FILE: &str = "report/summary.json";
pub const ORACLE_FILE: &str = "oracle/oracle.json";

/// Ground-truth scene as written by `gen-scene`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub spec: SceneSpec,
    pub rig: RigSpec,
    pub cameras: Vec<Camera>,
    pub frames: Vec<GaussianFrame>,
}

impl SceneFile {
    pub fn targets(&self) -> CliResult<Vec<GroundTruth>> {
        self.frames
            .iter()
            .map(|f| GroundTruth::from_frame(f, &self.cameras).map_err(CliError::from))
            .collect()
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::new("E_IO", format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::new("E_IO", format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::missing(path, format!("required artifact unreadable ({e})")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::new("E_JSON", format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> splatstream::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn gen_scene(cfg: &RunConfig) -> CliResult<SceneFile> {
    let frames = generate_scene(&cfg.scene, cfg.seed)?;
    let cameras = camera_rig(&cfg.rig)?;
    let scene = SceneFile {
        seed: cfg.seed,
        spec: cfg.scene.clone(),
        rig: cfg.rig.clone(),
        cameras,
        frames,
    };
    write(&cfg.out.join("config.toml"), cfg.to_toml()?)?;
    write(&cfg.out.join(SCENE_FILE), to_json(&scene)?)?;
    let gt = cfg.out.join("scene/gt");
    fs::create_dir_all(&gt)?;
    for (t, f) in scene.frames.iter().enumerate() {
        for (k, c) in scene.cameras.iter().enumerate() {
            render(f, c)?.save_png(&gt.join(format!("f{t:03}_c{k}.png")))?;
        }
    }
    log::info!("scene: {} frames, {} cameras", scene.frames.len(), scene.cameras.len());
    Ok(scene)
}

pub fn load_scene(out: &Path) -> CliResult<SceneFile> {
    read_json(&out.join(SCENE_FILE))
}

pub fn train(cfg: &RunConfig) -> CliResult<Grouping> {
    let scene = load_scene(&cfg.out)?;
    let targets = scene.targets()?;
    let degree = ShDegree::new(scene.spec.sh_degree)?;
    let g = build_groups(&targets, &scene.cameras, &cfg.weights, &cfg.train, cfg.tau, degree)?;
    write(&cfg.out.join(GROUPING_FILE), to_json(&g)?)?;
    write(&cfg.out.join(PLAN_FILE), g.plan.to_json()? + "\n")?;
    write(&cfg.out.join(TRAIN_LOG_FILE), to_json(&g.logs)?)?;
    for s in &g.spaces {
        let path = cfg.out.join(format!("train/keyframes/k{:03}.gsai", s.key()));
        write(&path, encode_frame(s.frame())?.to_bytes())?;
    }
    log::info!("train: {} groups", g.plan.groups.len());
    Ok(g)
}

pub fn load_grouping(out: &Path) -> CliResult<Grouping> {
    let g: Grouping = read_json(&out.join(GROUPING_FILE))?;
    g.plan.validate(g.deltas.len())?;
    Ok(g)
}

pub fn trace_for(cfg: &RunConfig, frames: usize) -> CliResult<BandwidthTrace> {
    Ok(match &cfg.trace {
        Some(p) => BandwidthTrace::from_csv_path(p).map_err(|e| match e {
            splatstream::Error::Io(io) => CliError::missing(p, io),
            e => e.into(),
        })?,
        None => BandwidthTrace::constant(cfg.bandwidth_mbps * 1e6, frames as f64 / cfg.stream.target_rate)?,
    })
}

pub fn simulate(cfg: &RunConfig) -> CliResult<StreamReport> {
    let scene = load_scene(&cfg.out)?;
    let g = load_grouping(&cfg.out)?;
    let trace = trace_for(cfg, g.plan.frame_count())?;
    let run = run_session(&g, &scene.cameras, &trace, &cfg.stream)?;
    let r = &run.report;
    write(&cfg.out.join(STREAM_REPORT_FILE), r.to_json()? + "\n")?;
    write(&cfg.out.join(STREAM_ROWS_FILE), csv_bytes(|b| r.write_rows_csv(b))?)?;
    write(&cfg.out.join(STREAM_CDF_FILE), csv_bytes(|b| r.write_cdf_csv(b))?)?;
    write(
        &cfg.out.join(LEVELS_FILE),
        csv_bytes(|b| write_level_spaces_csv(b, &run.level_spaces))?,
    )?;
    log::info!(
        "simulate: {} bytes, mean transmission {:.4}s",
        r.aggregates.total_bytes,
        r.aggregates.mean_transmission_s
    );
    Ok(run.report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub frames: usize,
    pub keyframes: Vec<u32>,
    pub tau: f64,
    pub min_train_psnr_db: f64,
    pub aggregates: serde_json::Value,
}

/// Plot-ready tables from the artifacts of `train` and `simulate`.
pub fn report(out: &Path) -> CliResult<Summary> {
    let g = load_grouping(out)?;
    let stream: serde_json::Value = read_json(&out.join(STREAM_REPORT_FILE))?;
    let levels = read(&out.join(LEVELS_FILE))?;
    let rows = stream["rows"]
        .as_array()
        .ok_or_else(|| CliError::new("E_JSON", format!("{}: no rows", out.join(STREAM_REPORT_FILE).display())))?;
    if rows.len() != g.psnr.len() {
        return Err(CliError::new(
            "E_STRUCTURAL",
            format!("stream report has {} frames, grouping {}", rows.len(), g.psnr.len()),
        ));
    }
    write(&out.join(QUALITY_CURVE_FILE), levels)?;

    let mut psnr = String::from("frame,keyframe,train_psnr_db,tau,client_psnr_db\n");
    for (t, row) in rows.iter().enumerate() {
        psnr += &format!(
            "{t},{},{:.6},{},{:.6}\n",
            g.plan.is_key(t as u32),
            g.psnr[t],
            g.plan.tau,
            row["client_psnr_db"].as_f64().unwrap_or(f64::NAN)
        );
    }
    write(&out.join(PSNR_FILE), psnr)?;

    // Empirical CDF of transmission time, one row per frame.
    let mut tx: Vec<f64> = rows.iter().filter_map(|r| r["transmission_time_s"].as_f64()).collect();
    tx.sort_by(f64::total_cmp);
    let mut cdf = String::from("transmission_time_s,cumulative_fraction\n");
    for (i, v) in tx.iter().enumerate() {
        cdf += &format!("{v:.9},{:.6}\n", (i + 1) as f64 / tx.len() as f64);
    }
    write(&out.join(CDF_FILE), cdf)?;

    let summary = Summary {
        frames: rows.len(),
        keyframes: g.plan.groups.iter().map(|s| s.key).collect(),
        tau: g.plan.tau,
        min_train_psnr_db: g.psnr.iter().copied().fold(f64::INFINITY, f64::min),
        aggregates: stream["aggregates"].clone(),
    };
    write(&out.join(SUMMARY_FILE), to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random_space(rng: &mut ChaCha8Rng, levels: usize) -> PruningLevelSpace {
    let mut size = rng.gen_range(2000..6000usize);
    let mut q = 100.0;
    let t: Vec<(f64, usize)> = (0..levels)
        .map(|i| {
            if i > 0 {
                size -= rng.gen_range(1..200);
                q -= rng.gen_range(0.01..8.0);
            }
            (q, size)
        })
        .collect();
    PruningLevelSpace::from_tuples(0, &t).expect("sizes decrease")
}

fn check_selection(rng: &mut ChaCha8Rng, beta: f64) -> OracleCheck {
    let (mut agree, mut feasible, mut bad) = (0, 0, Vec::new());
    for i in 0..1000 {
        let n = rng.gen_range(2..12);
        let sp = random_space(rng, n);
        let ctx = SelectionContext {
            bandwidth_bps: 8.0 * 30.0 * rng.gen_range(1000.0..6000.0),
            target_rate: 30.0,
            cliff_beta: beta,
        };
        let sel = select_pruning_level(&sp, &ctx).expect("valid context");
        if sel.feasible {
            feasible += 1;
            let opt = ilp_optimal(std::slice::from_ref(&sp), &[ctx]).expect("one frame");
            if opt[0] == IlpChoice::Level(sel.level) && ctx.fits(sp.size(sel.level)) {
                agree += 1;
            } else {
                bad.push(i);
            }
        }
    }
    OracleCheck {
        name: "selection-vs-ilp".into(),
        passed: bad.is_empty(),
        detail: format!("{agree}/{feasible} feasible instances at the optimum; mismatches {bad:?}"),
    }
}

fn check_separability(rng: &mut ChaCha8Rng) -> OracleCheck {
    let mut bad = 0;
    for _ in 0..200 {
        let frames = rng.gen_range(1..=5);
        let spaces: Vec<_> = (0..frames)
            .map(|_| {
                let n = rng.gen_range(1..=6);
                random_space(rng, n)
            })
            .collect();
        let ctxs: Vec<_> = (0..frames)
            .map(|_| SelectionContext {
                bandwidth_bps: 8.0 * rng.gen_range(1000.0..6000.0),
                target_rate: 1.0,
                cliff_beta: 2.0,
            })
            .collect();
        let got = ilp_optimal(&spaces, &ctxs).expect("matching lengths");
        // Enumerate joint selections over the frames that have any feasible
        // level.
        let live: Vec<usize> = (0..frames)
            .filter(|&f| (0..spaces[f].len()).any(|j| ctxs[f].fits(spaces[f].size(j))))
            .collect();
        let mut best = (f64::NEG_INFINITY, vec![]);
        let mut pick = vec![0usize; live.len()];
        'outer: loop {
            if live.iter().zip(&pick).all(|(&f, &j)| ctxs[f].fits(spaces[f].size(j))) {
                let q: f64 = live.iter().zip(&pick).map(|(&f, &j)| spaces[f].quality(j)).sum();
                if q > best.0 {
                    best = (q, pick.clone());
                }
            }
            for d in (0..live.len()).rev() {
                pick[d] += 1;
                if pick[d] < spaces[live[d]].len() {
                    continue 'outer;
                }
                pick[d] = 0;
            }
            break;
        }
        for (k, &f) in live.iter().enumerate() {
            if got[f] != IlpChoice::Level(best.1[k]) {
                bad += 1;
            }
        }
    }
    OracleCheck {
        name: "ilp-separability".into(),
        passed: bad == 0,
        detail: format!("{bad} frame choices differ from full enumeration"),
    }
}

fn check_gradients(seed: u64) -> CliResult<OracleCheck> {
    let rig = RigSpec {
        cameras: 2,
        width: 32,
        height: 32,
        focal: 40.0,
        ..Default::default()
    };
    let cams = camera_rig(&rig)?;
    let spec = SceneSpec {
        primitives: 20,
        frames: 2,
        mover_fraction: 0.5,
        motion_step: 0.05,
        ..Default::default()
    };
    let f = generate_scene(&spec, seed)?;
    let target = GroundTruth::from_frame(&f[1], &cams)?;
    let w = LossWeights::default();
    // Static primitives match the target exactly; move off those ties.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = f[0].flat_params();
    for v in &mut p {
        *v += rng.gen_range(-2e-3..2e-3);
    }
    let cur = GaussianFrame::from_flat_params(1, 0, ShDegree::ZERO, &p)?;
    let c = finite_difference_check(&cur, &cams, &target, &w, LossMode::GroupFrame { base: &f[0] }, 40, 1e-5, 1e-3, seed)?;
    Ok(OracleCheck {
        name: "gradient-finite-difference".into(),
        passed: c.failures.is_empty() && c.checked > 0,
        detail: format!("{} coordinates, {} skipped, max relative error {:.2e}", c.checked, c.skipped, c.max_rel_error),
    })
}

fn check_codec(seed: u64) -> CliResult<OracleCheck> {
    let mut worst = 0.0f64;
    let mut bound = 0.0f64;
    for s in 0..20 {
        let spec = SceneSpec {
            primitives: 10 + s * 7,
            frames: 1,
            ..Default::default()
        };
        let f = &generate_scene(&spec, seed + s as u64)?[0];
        let set = encode_frame(f)?;
        let back = decode_frame(&set)?;
        let step = set.planes().iter().map(|p| p.scale).fold(0.0, f64::max);
        bound = bound.max(step);
        for (a, b) in f.flat_params().iter().zip(back.flat_params()) {
            worst = worst.max((a - b).abs() - step);
        }
    }
    Ok(OracleCheck {
        name: "frame-codec-round-trip".into(),
        passed: worst <= 1e-12,
        detail: format!("largest error beyond one step {worst:.2e} (step up to {bound:.2e})"),
    })
}

/// Self-checks against independent references. Fails with `E_ORACLE` if
/// any check fails, after writing the results.
pub fn oracle_check(cfg: &RunConfig) -> CliResult<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let checks = vec![
        check_selection(&mut rng, cfg.stream.cliff_beta),
        check_separability(&mut rng),
        check_gradients(cfg.seed)?,
        check_codec(cfg.seed)?,
    ];
    write(&cfg.out.join(ORACLE_FILE), to_json(&checks)?)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::new("E_ORACLE", format!("failed checks: {}", failed.join(", "))));
    }
    Ok(checks)
}

/// Paths of every artifact the full pipeline writes, relative to `out`.
pub fn artifact_paths() -> Vec<PathBuf> {
    [
        SCENE_FILE,
        GROUPING_FILE,
        PLAN_FILE,
        TRAIN_LOG_FILE,
        STREAM_REPORT_FILE,
        STREAM_ROWS_FILE,
        STREAM_CDF_FILE,
        LEVELS_FILE,
        QUALITY_CURVE_FILE,
        PSNR_FILE,
        CDF_FILE,
        SUMMARY_FILE,
    ]
    .iter()
    .map(PathBuf::from)
    .collect()
}
