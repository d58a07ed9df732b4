//! Run manifests, loss curves, evaluation reports and ablation tables.

use std::fs;
use std::path::{Path, PathBuf};

use ftvp_core::train::{AblationRow, EvalReport, LossRecord, Suite};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, IoContext, Result};

/// Digest of the sources this binary was built from.
pub const CODE_DIGEST: &str = env!("FTVP_CODE_DIGEST");
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_digest: String,
    pub version: String,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            code_digest: CODE_DIGEST.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started: now(),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = now();
        let path = dir.join(RUN_MANIFEST);
        write_json(&path, &self)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| AppError::data(e.to_string()))?;
    fs::write(path, text + "\n").at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AppError + '_ {
    move |e| AppError::data(format!("{}: {e}", path.display()))
}

/// `epoch,iter,lr,total,seg_0..seg_n,cycle_total`.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let heads = history.first().map_or(0, |r| r.seg.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = ["epoch", "iter", "lr", "total"].map(String::from).to_vec();
    header.extend((0..heads).map(|i| format!("seg_{i}")));
    header.push("cycle_total".into());
    w.write_record(&header).map_err(csv_err(path))?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.iter.to_string(), r.lr.to_string(), r.total.to_string()];
        row.extend(r.seg.iter().map(f64::to_string));
        row.push(r.cycle_total.to_string());
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().at(path)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let bad = |m: &str| AppError::data(format!("{}: {m}", path.display()));
    let header = r.headers().map_err(csv_err(path))?.clone();
    let heads = header.iter().filter(|h| h.starts_with("seg_")).count();
    if header.len() != heads + 5 || header.get(header.len() - 1) != Some("cycle_total") {
        return Err(bad("unexpected loss header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let f = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad("bad number"));
        out.push(LossRecord {
            epoch: f(0)? as usize,
            iter: f(1)? as usize,
            lr: f(2)?,
            total: f(3)?,
            seg: (0..heads).map(|i| f(4 + i)).collect::<Result<_>>()?,
            cycle_total: f(4 + heads)?,
        });
    }
    Ok(out)
}

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}

/// One row per variant, labelled as in the published tables.
pub fn write_ablation_csv(path: &Path, suite: Suite, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    match suite {
        Suite::Accretion => w.write_record(["structure", "miou", "map"]),
        Suite::KvCombos => w.write_record(["K", "V", "miou", "map"]),
    }
    .map_err(csv_err(path))?;
    for r in rows {
        let (miou, map) = (format!("{:.2}", r.miou), format!("{:.2}", r.map));
        match (suite, r.kv) {
            (Suite::KvCombos, Some(kv)) => {
                let (k, v) = kv.table_row();
                w.write_record([k, v, &miou, &map])
            }
            _ => w.write_record([r.label.as_str(), &miou, &map]),
        }
        .map_err(csv_err(path))?;
    }
    w.flush().at(path)
}
