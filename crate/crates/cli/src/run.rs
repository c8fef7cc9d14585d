//! Subcommand implementations.

use std::collections::BTreeSet;
use std::error::Error;
use std::path::{Path, PathBuf};

use clod::config::ExperimentConfig;
use clod::continual::{
    build_schedule, evaluate, sensitivity_delta, train_joint as fit_joint, EvalRecord, Learner, Method, MethodConfig,
    TaskSchedule,
};
use clod::data::{generate_dataset, write_layout, DetectionSet};
use clod::detector::Detector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::results::{
    ablation_table, final_task_table, read_csv, sensitivity_table, task_curves, write_csv, AblationRow, ResultRow,
    SensitivityRow,
};
use crate::{plot, RunArgs};

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

struct Prepared {
    cfg: ExperimentConfig,
    schedule: TaskSchedule,
    train: DetectionSet,
    test: DetectionSet,
}

fn load_config(run: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(s) = &run.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(m) = run.memory_size {
        cfg.method.memory_size = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(run: &RunArgs) -> CliResult<Prepared> {
    let cfg = load_config(run)?;
    let (train, test) = match &run.data {
        Some(dir) => {
            let images = dir.join("images");
            (
                DetectionSet::load(&dir.join("annotations/full.json"), &images)?,
                DetectionSet::load(&dir.join("annotations/test.json"), &images)?,
            )
        }
        None => {
            let ds = generate_dataset(&cfg.data.scene, cfg.data.num_train, cfg.data.num_test)?;
            (ds.train, ds.test)
        }
    };
    let schedule = build_schedule(train.num_classes(), cfg.scenario()?, None)?;
    Ok(Prepared {
        cfg,
        schedule,
        train,
        test,
    })
}

fn new_detector(p: &Prepared) -> CliResult<Detector> {
    let size = p
        .train
        .annotations
        .images
        .first()
        .ok_or("training split has no images")?
        .width as usize;
    let dcfg = p
        .cfg
        .detector
        .detector_config(size, p.train.annotations.class_names(), p.cfg.seed)?;
    Ok(Detector::new(dcfg)?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    config_file: &'static str,
    config_sha256: String,
    data: String,
}

/// Writes the resolved config and a manifest pointing at it.
fn write_manifest(out_dir: &Path, command: &str, cfg: &ExperimentConfig, run: &RunArgs) -> CliResult {
    std::fs::create_dir_all(out_dir)?;
    let text = cfg.to_toml()?;
    std::fs::write(out_dir.join("config.toml"), &text)?;
    let digest = Sha256::digest(text.as_bytes());
    let manifest = Manifest {
        tool: "clod",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: std::env::args().collect(),
        seed: cfg.seed,
        config_file: "config.toml",
        config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        data: run
            .data
            .as_ref()
            .map_or("generated from config".into(), |d| d.display().to_string()),
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn to_row(scenario: &str, method: &str, seed: u64, r: &EvalRecord) -> ResultRow {
    let pct = |v: f64| (v * 1e4).round() / 100.0;
    ResultRow {
        scenario: scenario.to_string(),
        method: method.to_string(),
        seed,
        task: r.task + 1,
        old: r.old.map(pct),
        new: pct(r.new),
        all: pct(r.all),
    }
}

fn method_config(cfg: &ExperimentConfig, method: Option<&str>) -> CliResult<MethodConfig> {
    let mut mc = cfg.method.clone();
    if let Some(m) = method {
        mc.method = m.parse()?;
    }
    Ok(mc)
}

pub fn gen_data(run: &RunArgs) -> CliResult {
    let cfg = load_config(run)?;
    let ds = generate_dataset(&cfg.data.scene, cfg.data.num_train, cfg.data.num_test)?;
    let schedule = build_schedule(ds.spec.num_classes(), cfg.scenario()?, None)?;
    write_layout(&ds, &schedule.tasks, &run.out_dir)?;
    write_manifest(&run.out_dir, "gen-data", &cfg, run)?;
    println!(
        "wrote {} train / {} test images and {} task files to {}",
        ds.train.len(),
        ds.test.len(),
        schedule.num_tasks(),
        run.out_dir.display()
    );
    Ok(())
}

pub fn train_joint(run: &RunArgs) -> CliResult {
    let p = prepare(run)?;
    write_manifest(&run.out_dir, "train-joint", &p.cfg, run)?;
    let mut model = new_detector(&p)?;
    let classes: BTreeSet<usize> = p.schedule.tasks.iter().flatten().copied().collect();
    let (log, record) = fit_joint(&mut model, &p.train, &p.test, &classes, &p.cfg.train, p.cfg.seed)?;
    std::fs::create_dir_all(run.out_dir.join("checkpoints"))?;
    model.save(&run.out_dir.join("checkpoints/joint.bin"))?;
    let row = to_row(&p.cfg.scenario, "joint", p.cfg.seed, &record);
    write_csv(&run.out_dir.join("results.csv"), std::slice::from_ref(&row))?;
    let summary = serde_json::json!({ "scenario": p.cfg.scenario, "method": "joint", "seed": p.cfg.seed,
        "records": [record], "logs": [log] });
    std::fs::write(run.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("joint: all {:.1}", row.all);
    Ok(())
}

pub fn train_cl(run: &RunArgs, method: Option<&str>) -> CliResult {
    let p = prepare(run)?;
    let mc = method_config(&p.cfg, method)?;
    let mut cfg = p.cfg.clone();
    cfg.method = mc.clone();
    write_manifest(&run.out_dir, "train-cl", &cfg, run)?;
    let ckpt = run.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let mut learner = Learner::new(new_detector(&p)?);
    let mut rows = Vec::new();
    while !learner.is_done(&p.schedule) {
        let record = learner
            .train_next(&p.train, &p.test, &p.schedule, &mc, &cfg.train, cfg.seed)?
            .clone();
        learner.model.save(&ckpt.join(format!("task{}.bin", record.task + 1)))?;
        let row = to_row(&cfg.scenario, mc.method.name(), cfg.seed, &record);
        println!(
            "{} {} task {}: old {} new {:.1} all {:.1}",
            row.scenario,
            row.method,
            row.task,
            row.old.map_or("-".into(), |o| format!("{o:.1}")),
            row.new,
            row.all
        );
        rows.push(row);
    }
    write_csv(&run.out_dir.join("results.csv"), &rows)?;
    if let Some(memory) = &learner.memory {
        std::fs::write(run.out_dir.join("memory.json"), memory.to_manifest()?)?;
    }
    let summary = serde_json::json!({ "scenario": cfg.scenario, "method": mc.method.name(), "seed": cfg.seed,
        "records": learner.records, "logs": learner.logs });
    std::fs::write(run.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub fn eval(run: &RunArgs, checkpoint: &Path, task: usize) -> CliResult {
    if !checkpoint.is_file() {
        return Err(format!("checkpoint not found: {}", checkpoint.display()).into());
    }
    let p = prepare(run)?;
    if task == 0 || task > p.schedule.num_tasks() {
        return Err(format!("task must be in 1..={}", p.schedule.num_tasks()).into());
    }
    let model = Detector::load(checkpoint)?;
    let old = p.schedule.classes_before(task - 1);
    let record = evaluate(&model, &p.test, task - 1, &old, &p.schedule.tasks[task - 1], &p.cfg.train.eval)?;
    let row = to_row(&p.cfg.scenario, "checkpoint", p.cfg.seed, &record);
    std::fs::create_dir_all(&run.out_dir)?;
    std::fs::write(run.out_dir.join("eval.json"), serde_json::to_string_pretty(&record)?)?;
    println!(
        "task {}: old {} new {:.1} all {:.1}",
        row.task,
        row.old.map_or("-".into(), |o| format!("{o:.1}")),
        row.new,
        row.all
    );
    Ok(())
}

fn read_all(inputs: &[PathBuf]) -> CliResult<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_csv(path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    Ok(rows)
}

pub fn report(inputs: &[PathBuf], output: Option<&Path>) -> CliResult {
    let table = final_task_table(&read_all(inputs)?);
    match output {
        Some(path) => std::fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

pub fn plot(inputs: &[PathBuf], out_dir: &Path) -> CliResult {
    let rows = read_all(inputs)?;
    std::fs::create_dir_all(out_dir)?;
    let mut scenarios: Vec<&str> = rows.iter().map(|r| r.scenario.as_str()).collect();
    scenarios.dedup();
    let scenarios: BTreeSet<&str> = scenarios.into_iter().collect();
    for s in scenarios {
        let path = out_dir.join(format!("plot_{s}.svg"));
        plot::task_curves_svg(&path, &format!("{s}: mAP after each task"), &task_curves(&rows, s))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Trains the (method-independent) first task once, then every variant
/// from that shared state.
fn run_variants(p: &Prepared, variants: &[MethodConfig]) -> CliResult<Vec<Learner>> {
    let first = variants.first().ok_or("no variants to run")?;
    let mut base = Learner::new(new_detector(p)?);
    base.train_next(&p.train, &p.test, &p.schedule, first, &p.cfg.train, p.cfg.seed)?;
    variants
        .iter()
        .map(|mc| {
            let mut l = base.clone();
            l.run(&p.train, &p.test, &p.schedule, mc, &p.cfg.train, p.cfg.seed)?;
            Ok(l)
        })
        .collect()
}

pub fn sensitivity(run: &RunArgs, method: Option<&str>, sizes: &[usize]) -> CliResult {
    let &[m1, m2] = sizes else {
        return Err(format!("--memory-sizes takes exactly two values, got {}", sizes.len()).into());
    };
    let p = prepare(run)?;
    let mut mc = method_config(&p.cfg, method.or(Some("yolo-lwf+ocdm")))?;
    if !mc.method.uses_memory() {
        return Err(format!("{} keeps no replay memory; pick a +ocdm method", mc.method).into());
    }
    write_manifest(&run.out_dir, "sensitivity", &p.cfg, run)?;
    let variants: Vec<MethodConfig> = [m1, m2]
        .iter()
        .map(|&m| {
            mc.memory_size = m;
            mc.clone()
        })
        .collect();
    let learners = run_variants(&p, &variants)?;
    let mut rows = Vec::new();
    for (l, m) in learners.iter().zip([m1, m2]) {
        for r in &l.records {
            rows.push(to_row(&p.cfg.scenario, &format!("{}@m{m}", mc.method), p.cfg.seed, r));
        }
    }
    write_csv(&run.out_dir.join("results.csv"), &rows)?;
    let finals: Vec<f64> = learners
        .iter()
        .map(|l| l.records.last().map_or(0.0, |r| r.all * 100.0))
        .collect();
    let row = SensitivityRow {
        method: mc.method.name().to_string(),
        memory_m1: m1,
        memory_m2: m2,
        all_m1: finals[0],
        all_m2: finals[1],
        delta_percent: sensitivity_delta(finals[0], finals[1]).ok(),
    };
    let table = sensitivity_table(std::slice::from_ref(&row));
    write_csv_rows(&run.out_dir.join("sensitivity.csv"), std::slice::from_ref(&row))?;
    std::fs::write(run.out_dir.join("sensitivity.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const ABLATION_TOGGLES: [&str; 4] = ["ce", "wce", "mask", "cls_iou"];

pub fn ablate(run: &RunArgs, toggles: &[String]) -> CliResult {
    for t in toggles {
        if !ABLATION_TOGGLES.contains(&t.as_str()) {
            return Err(format!("unknown toggle `{t}` (valid: {})", ABLATION_TOGGLES.join(", ")).into());
        }
    }
    let p = prepare(run)?;
    write_manifest(&run.out_dir, "ablate", &p.cfg, run)?;
    let base = {
        let mut mc = p.cfg.method.clone();
        mc.method = Method::YoloLwf;
        mc
    };
    let variants: Vec<MethodConfig> = (0..1usize << toggles.len())
        .map(|bits| {
            let mut mc = base.clone();
            for (i, t) in toggles.iter().enumerate() {
                let on = bits >> i & 1 == 1;
                match t.as_str() {
                    "ce" => mc.distill.use_ce = on,
                    "wce" => mc.distill.use_wce = on,
                    "mask" => mc.mask = on,
                    _ => mc.distill.use_cls_iou = on,
                }
            }
            mc
        })
        .collect();
    let learners = run_variants(&p, &variants)?;
    let rows: Vec<AblationRow> = variants
        .iter()
        .zip(&learners)
        .map(|(mc, l)| {
            let r = to_row(&p.cfg.scenario, "yolo-lwf", p.cfg.seed, l.records.last().expect("trained"));
            AblationRow {
                ce: mc.distill.use_ce,
                wce: mc.distill.use_wce,
                mask: mc.mask,
                cls_iou: mc.distill.use_cls_iou,
                seed: p.cfg.seed,
                old: r.old,
                new: r.new,
                all: r.all,
            }
        })
        .collect();
    write_csv_rows(&run.out_dir.join("ablation.csv"), &rows)?;
    let table = ablation_table(&rows);
    std::fs::write(run.out_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
