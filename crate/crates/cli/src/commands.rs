use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use patchvo::costsweep::{
    cost_report, knee_point, normalize, pareto_front, run_sweep, write_rows, CostEvaluator, Evaluator,
    OracleEvaluator, ParetoPoint, PipelineEvaluator, SweepGrid, SweepOptions, TableEvaluator,
};
use patchvo::evaluation::{evaluate, median_of_runs, trim_trajectory, umeyama_align, ate, EvalReport, RunsSummary};
use patchvo::events::{parse_event_stream, voxelize_stream, write_csv, EventFormat, EventVoxelGrid, Resolution, WindowPolicy};
use patchvo::model::{load_weights, parse_kv_text, ModelConfig, WeightStore};
use patchvo::pipeline::{run as run_pipeline, Motion, OracleOptions, SceneSpec, SyntheticScene, Trajectory};

use crate::manifest::{from_kv, load_run_config, require_exists, run_keys_text, usage, RunConfig, RunManifest};
use crate::plot::sweep_plot;

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorKind {
    Cost,
    Pipeline,
    Oracle,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotionKind {
    Static,
    Lateral,
    Forward,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn read_grids(path: &Path, rc: &RunConfig) -> Result<Vec<EventVoxelGrid>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let res = Resolution::new(rc.model.width, rc.model.height);
    let events = parse_event_stream(&bytes, EventFormat::from_path(path), res)?;
    let grids = voxelize_stream(&events, rc.window, rc.model.bins, res)?;
    if grids.is_empty() {
        return Err(patchvo::Error::Validation(format!("{} holds no events", path.display())).into());
    }
    Ok(grids)
}

fn weights_for(path: Option<&Path>, cfg: &ModelConfig, seed: u64) -> Result<WeightStore> {
    Ok(match path {
        Some(p) => load_weights(p, cfg)?,
        None => WeightStore::init_random(cfg, seed),
    })
}

pub fn run(events: PathBuf, config: Option<PathBuf>, weights: Option<PathBuf>, seed: u64, out: PathBuf) -> Result<()> {
    let m = RunManifest {
        events,
        config,
        weights,
        seed,
        out,
    };
    m.check()?;
    let rc = load_run_config(m.config.as_deref(), ModelConfig::baseline(), m.seed)?;
    rc.model.validate()?;
    let w = weights_for(m.weights.as_deref(), &rc.model, m.seed)?;
    let grids = read_grids(&m.events, &rc)?;
    let (traj, stats) = run_pipeline(&grids, &w, &rc.model, rc.tracker.clone())?;
    create_dir(&m.out)?;
    traj.write_tum(&m.out.join(TRAJECTORY_FILE))?;
    let sp = m.out.join(STATS_FILE);
    let f = fs::File::create(&sp).with_context(|| format!("creating {}", sp.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &stats)?;
    println!(
        "{} frames, {:.3} GMAC/frame, peak {:.1} MB -> {}",
        stats.frames,
        stats.macs.total() as f64 / 1e9 / stats.frames.max(1) as f64,
        stats.peak_memory_bytes as f64 / 1e6,
        m.out.display()
    );
    Ok(())
}

fn run_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "tum")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no trajectory files in {}", dir.display())));
    }
    Ok(files)
}

fn eval_one(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<EvalReport> {
    let mut r = evaluate(est, gt)?;
    if !with_scale {
        let s = umeyama_align(est, gt, false)?;
        r.ate_m = ate(est, gt, &s)?;
        r.alignment = (&s).into();
    }
    Ok(r)
}

pub fn eval(
    est: Option<PathBuf>,
    gt: PathBuf,
    head: f64,
    tail: f64,
    runs_dir: Option<PathBuf>,
    with_scale: bool,
    json: bool,
) -> Result<()> {
    require_exists(&gt, "ground truth")?;
    if est.is_none() && runs_dir.is_none() {
        return Err(usage("pass --est, --runs-dir, or both"));
    }
    if let Some(e) = &est {
        require_exists(e, "estimate")?;
    }
    if let Some(d) = &runs_dir {
        require_exists(d, "runs directory")?;
    }
    let gt = trim_trajectory(&Trajectory::read_tum(&gt)?, head, tail)?;
    let runs = match &runs_dir {
        Some(d) => {
            let files = run_files(d)?;
            let mut ates = Vec::new();
            for f in &files {
                let r = eval_one(&Trajectory::read_tum(f)?, &gt, with_scale).with_context(|| format!("evaluating {}", f.display()))?;
                ates.push(r.ate_m);
            }
            Some(RunsSummary {
                files: files.iter().map(|f| f.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect(),
                median_ate_m: median_of_runs(&ates)?,
                ates_m: ates,
            })
        }
        None => None,
    };
    match est {
        Some(e) => {
            let mut r = eval_one(&Trajectory::read_tum(&e)?, &gt, with_scale)?;
            r.runs = runs;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.to_table());
            }
        }
        None => {
            let r = runs.expect("runs_dir checked above");
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                for (f, a) in r.files.iter().zip(&r.ates_m) {
                    println!("run {f:<20} {a:.6} m");
                }
                println!("median of {} runs  {:.6} m", r.ates_m.len(), r.median_ate_m);
            }
        }
    }
    Ok(())
}

fn model_from(config: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<ModelConfig> {
    let mut kv = match config {
        Some(p) => {
            require_exists(p, "config file")?;
            parse_kv_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => Default::default(),
    };
    if let Some(p) = preset {
        kv.insert("preset".into(), p.into());
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("override `{o}` is not KEY=VALUE")))?;
        kv.insert(k.trim().into(), v.trim().into());
    }
    Ok(from_kv(kv, ModelConfig::baseline(), 0)?.model)
}

pub fn cost(config: Option<PathBuf>, preset: Option<String>, overrides: Vec<String>, csv: Option<PathBuf>, json: bool) -> Result<()> {
    let cfg = model_from(config.as_deref(), preset.as_deref(), &overrides)?;
    let r = cost_report(&cfg)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        print!("{}", r.to_table());
    }
    if let Some(p) = csv {
        let m = &r.memory;
        let text = format!(
            "n_edges,e_sigma,macs_per_frame,macs_patchifier,macs_correlation,macs_update,macs_ba,peak_memory_bytes,\
             mem_weights,mem_feature_maps,mem_context_map,mem_patches,mem_edges,mem_update_workspace,mem_ba_workspace\n\
             {},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.n_edges,
            r.e_sigma,
            r.macs_per_frame,
            r.macs.patchifier,
            r.macs.correlation,
            r.macs.update,
            r.macs.ba,
            r.peak_memory_bytes,
            m.weights,
            m.feature_maps,
            m.context_map,
            m.patches,
            m.edges,
            m.update_workspace,
            m.ba_workspace
        );
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub struct SweepArgs {
    pub grid: Option<PathBuf>,
    pub evaluator: EvaluatorKind,
    pub dataset: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub noise: f64,
    pub out: PathBuf,
    pub resume: bool,
    pub max_cells: Option<usize>,
}

fn find_events(dir: &Path) -> Result<PathBuf> {
    ["events.csv", "events.txt", "events.bin"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| usage(format!("no events.csv, events.txt or events.bin in {}", dir.display())))
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let grid = match &a.grid {
        Some(p) => {
            require_exists(p, "grid spec")?;
            let g = SweepGrid::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            if g.cells().is_empty() {
                return Err(usage("sweep grid is empty"));
            }
            g
        }
        None => SweepGrid::standard(),
    };
    if let Some(c) = &a.config {
        require_exists(c, "config file")?;
    }
    let dataset_config = a.dataset.as_ref().map(|d| d.join("config.txt")).filter(|p| p.exists());
    let rc = load_run_config(a.config.as_deref().or(dataset_config.as_deref()), ModelConfig::baseline(), a.seed)?;
    let evaluator: Box<dyn Evaluator> = match a.evaluator {
        EvaluatorKind::Cost => Box::new(CostEvaluator),
        EvaluatorKind::Table => {
            let p = a.metrics.as_ref().ok_or_else(|| usage("the table evaluator needs --metrics"))?;
            require_exists(p, "metrics table")?;
            Box::new(TableEvaluator::from_csv(p)?)
        }
        EvaluatorKind::Oracle => Box::new(OracleEvaluator {
            scene: SyntheticScene::generate(SceneSpec {
                width: rc.model.width,
                height: rc.model.height,
                seed: a.seed,
                ..Default::default()
            }),
            options: OracleOptions {
                flow_noise_px: a.noise,
                seed: a.seed,
                ..Default::default()
            },
        }),
        EvaluatorKind::Pipeline => {
            let d = a.dataset.as_ref().ok_or_else(|| usage("the pipeline evaluator needs --dataset"))?;
            require_exists(d, "dataset directory")?;
            let gt = d.join("groundtruth.txt");
            require_exists(&gt, "ground truth")?;
            if let Some(w) = &a.weights {
                require_exists(w, "weights")?;
            }
            Box::new(PipelineEvaluator {
                grids: read_grids(&find_events(d)?, &rc)?,
                ground_truth: Trajectory::read_tum(&gt)?,
                weights: a.weights.clone(),
                seed: a.seed,
                options: rc.tracker.clone(),
            })
        }
    };
    create_dir(&a.out)?;
    let progress = a.out.join("progress.csv");
    if !a.resume && progress.exists() {
        fs::remove_file(&progress).with_context(|| format!("removing {}", progress.display()))?;
    }
    let outcome = run_sweep(
        &rc.model,
        &grid,
        evaluator.as_ref(),
        &SweepOptions {
            progress: Some(progress),
            max_new_cells: a.max_cells,
            parallel: a.evaluator != EvaluatorKind::Pipeline,
        },
    )?;
    write_rows(&a.out.join("results.csv"), &outcome.rows)?;
    let failed = outcome.rows.iter().filter(|r| !r.ok()).count();
    println!(
        "{} cells evaluated with the {} evaluator ({failed} failed){}",
        outcome.rows.len(),
        evaluator.name(),
        if outcome.complete { "" } else { ", sweep incomplete" }
    );
    let points: Vec<ParetoPoint> = outcome
        .rows
        .iter()
        .filter_map(|r| {
            r.metric.map(|y| ParetoPoint {
                n_patches: r.n_patches,
                removal_window: r.removal_window,
                patch_lifetime: r.patch_lifetime,
                x: r.macs_per_frame as f64 / 1e9,
                y,
            })
        })
        .collect();
    let front = pareto_front(&points);
    let mut csv = String::from("n_patches,removal_window,patch_lifetime,gmacs_per_frame,metric\n");
    for p in &front {
        csv.push_str(&format!("{},{},{},{},{}\n", p.n_patches, p.removal_window, p.patch_lifetime, p.x, p.y));
    }
    let pp = a.out.join("pareto.csv");
    fs::write(&pp, csv).with_context(|| format!("writing {}", pp.display()))?;
    let knee = knee_point(&normalize(&front)).map(|k| (k, front[k.index]));
    let kp = a.out.join("knee.json");
    match &knee {
        Ok((k, p)) => {
            let j = serde_json::json!({
                "n_patches": p.n_patches,
                "removal_window": p.removal_window,
                "patch_lifetime": p.patch_lifetime,
                "gmacs_per_frame": p.x,
                "metric": p.y,
                "normalized_distance": k.distance,
                "degenerate": k.degenerate,
            });
            fs::write(&kp, serde_json::to_string_pretty(&j)?).with_context(|| format!("writing {}", kp.display()))?;
            println!(
                "knee: n_patches={} removal_window={} patch_lifetime={} ({:.4} GMAC/frame, metric {:.6}){}",
                p.n_patches,
                p.removal_window,
                p.patch_lifetime,
                p.x,
                p.y,
                if k.degenerate { " [degenerate front]" } else { "" }
            );
        }
        Err(e) => println!("knee: unavailable ({e})"),
    }
    sweep_plot(&a.out.join("pareto.svg"), &points, &front, knee.ok().map(|(_, p)| p))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    out: PathBuf,
    frames: usize,
    landmarks: usize,
    motion: MotionKind,
    width: usize,
    height: usize,
    preset: &str,
    seed: u64,
) -> Result<()> {
    let cfg = ModelConfig::preset(preset)
        .ok_or_else(|| usage(format!("unknown preset `{preset}`")))?
        .with_resolution(width, height);
    cfg.validate()?;
    let scene = SyntheticScene::generate(SceneSpec {
        width,
        height,
        frames,
        landmarks,
        motion: match motion {
            MotionKind::Static => Motion::Static,
            MotionKind::Lateral => Motion::Lateral,
            MotionKind::Forward => Motion::Forward,
        },
        seed,
        ..Default::default()
    });
    create_dir(&out)?;
    let ep = out.join("events.csv");
    let f = fs::File::create(&ep).with_context(|| format!("creating {}", ep.display()))?;
    write_csv(BufWriter::new(f), &scene.events()).with_context(|| format!("writing {}", ep.display()))?;
    scene.ground_truth().write_tum(&out.join("groundtruth.txt"))?;
    let text = format!(
        "{}{}",
        cfg.to_kv_text(),
        run_keys_text(WindowPolicy::FixedDuration(scene.spec.window_us), &scene.intrinsics)
    );
    let cp = out.join("config.txt");
    fs::write(&cp, text).with_context(|| format!("writing {}", cp.display()))?;
    println!("{frames} frames written to {}", out.display());
    Ok(())
}

pub fn init_weights(config: Option<PathBuf>, preset: Option<String>, seed: u64, out: PathBuf) -> Result<()> {
    let cfg = model_from(config.as_deref(), preset.as_deref(), &[])?;
    cfg.validate()?;
    create_dir(&out)?;
    WeightStore::init_random(&cfg, seed).save(&out)?;
    println!("weights for config {} written to {}", cfg.hash_hex(), out.display());
    Ok(())
}

