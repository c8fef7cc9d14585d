//! Result rows, their CSV form and the text tables built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One task boundary of one run. mAP values are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub task: usize,
    /// Empty after the first task.
    pub old: Option<f64>,
    pub new: f64,
    pub all: f64,
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<(), Box<dyn std::error::Error>> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, Box<dyn std::error::Error>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cell(xs: &[f64]) -> String {
    if xs.is_empty() {
        "-".into()
    } else {
        format!("{:.1}", mean(xs))
    }
}

/// Final-task old/new/all per method (rows) and scenario (column groups),
/// averaged over seeds. Rows keep first-appearance order of the methods.
pub fn final_task_table(rows: &[ResultRow]) -> String {
    let mut scenarios: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    // last task reached by each (scenario, method, seed)
    let mut last: BTreeMap<(&str, &str, u64), &ResultRow> = BTreeMap::new();
    for r in rows {
        let key = (r.scenario.as_str(), r.method.as_str(), r.seed);
        if last.get(&key).is_none_or(|prev| r.task >= prev.task) {
            last.insert(key, r);
        }
    }
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "");
    for s in &scenarios {
        let _ = write!(out, " | {:^20}", s);
    }
    out.push('\n');
    let _ = write!(out, "{:width$}", "method");
    for _ in &scenarios {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", "old", "new", "all");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(width + scenarios.len() * 23));
    for m in &methods {
        let _ = write!(out, "{:width$}", m);
        for s in &scenarios {
            let finals: Vec<&ResultRow> = last
                .iter()
                .filter(|((sc, me, _), _)| sc == s && me == m)
                .map(|(_, r)| *r)
                .collect();
            let old: Vec<f64> = finals.iter().filter_map(|r| r.old).collect();
            let new: Vec<f64> = finals.iter().map(|r| r.new).collect();
            let all: Vec<f64> = finals.iter().map(|r| r.all).collect();
            let _ = write!(out, " | {:>6} {:>6} {:>6}", cell(&old), cell(&new), cell(&all));
        }
        out.push('\n');
    }
    out
}

/// Per-seed mean of one metric after each task, per method, for one scenario.
pub fn task_curves(rows: &[ResultRow], scenario: &str) -> Vec<(String, Vec<(usize, f64)>)> {
    let mut per: Vec<(String, BTreeMap<usize, Vec<f64>>)> = Vec::new();
    for r in rows.iter().filter(|r| r.scenario == scenario) {
        let idx = match per.iter().position(|(m, _)| *m == r.method) {
            Some(i) => i,
            None => {
                per.push((r.method.clone(), BTreeMap::new()));
                per.len() - 1
            }
        };
        per[idx].1.entry(r.task).or_default().push(r.all);
    }
    per.into_iter()
        .map(|(m, by_task)| (m, by_task.into_iter().map(|(t, v)| (t, mean(&v))).collect()))
        .collect()
}

/// Memory-size sensitivity rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub method: String,
    pub memory_m1: usize,
    pub memory_m2: usize,
    pub all_m1: f64,
    pub all_m2: f64,
    pub delta_percent: Option<f64>,
}

pub fn sensitivity_table(rows: &[SensitivityRow]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    if let Some(r) = rows.first() {
        let _ = writeln!(
            out,
            "{:width$} | {:>7} {:>7} {:>7}",
            "method",
            format!("m={}", r.memory_m1),
            format!("m={}", r.memory_m2),
            "Δ%"
        );
    }
    for r in rows {
        let delta = r.delta_percent.map_or("undef".to_string(), |d| format!("{d:.1}%"));
        let _ = writeln!(out, "{:width$} | {:>7.1} {:>7.1} {:>7}", r.method, r.all_m1, r.all_m2, delta);
    }
    out
}

/// One configuration of the distillation ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ce: bool,
    pub wce: bool,
    pub mask: bool,
    pub cls_iou: bool,
    pub seed: u64,
    pub old: Option<f64>,
    pub new: f64,
    pub all: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { " " };
    let mut out = String::from("CE  WCE  MASK  CLS-IoU |    old    new    all\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:^2}  {:^3}  {:^4}  {:^7} | {:>6} {:>6.1} {:>6.1}",
            mark(r.ce),
            mark(r.wce),
            mark(r.mask),
            mark(r.cls_iou),
            r.old.map_or("-".into(), |o| format!("{o:.1}")),
            r.new,
            r.all
        );
    }
    out
}
