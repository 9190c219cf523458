//! Evaluation, similarity structure and run outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, Matrix};
use crate::protocol::RunResult;
use crate::vision::ModelParams;

pub const TOP_K: usize = 5;

/// Position of `label` when classes are sorted by descending logit, ties
/// going to the lower class index.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count()
}

/// Fraction of rows whose label ranks within the top `k`.
pub fn top_k_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Metric("accuracy over an empty split".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| label_rank(logits.row(i), y) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top5: f64,
}

pub fn evaluate_client(model: &ModelParams, inputs: &Matrix, labels: &[usize]) -> Result<TopK> {
    if labels.is_empty() {
        return Err(Error::Metric("evaluation split is empty".into()));
    }
    let logits = model.logits(inputs)?;
    Ok(TopK {
        top1: top_k_accuracy(&logits, labels, 1)?,
        top5: top_k_accuracy(&logits, labels, TOP_K)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTraffic {
    pub client: usize,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// `None` for clients without a local test split.
    pub client_top1: Vec<Option<f64>>,
    pub client_top5: Vec<Option<f64>>,
    pub mean_local_top1: f64,
    pub mean_local_top5: f64,
    /// Mean over clients of accuracy on the balanced held-out set.
    pub global_top1: Option<f64>,
    pub server_loss: Option<f64>,
    pub mean_client_loss: Option<f64>,
    /// Per-client message sizes in this round, clients in ascending order.
    pub traffic: Vec<ClientTraffic>,
}

impl RoundMetrics {
    pub fn uplink_floats(&self) -> u64 {
        self.traffic.iter().map(|t| t.uplink_floats).sum()
    }

    pub fn downlink_floats(&self) -> u64 {
        self.traffic.iter().map(|t| t.downlink_floats).sum()
    }
}

/// Cosine structure of a prototype bank relative to a class hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub matrix: Matrix,
    /// Mean off-diagonal cosine between classes of the same supercluster.
    pub within: f64,
    /// Mean cosine between classes of different superclusters.
    pub across: f64,
    pub gap: f64,
}

pub fn semantic_structure_score(
    prototypes: &Matrix,
    hierarchy: Option<&[usize]>,
) -> Result<SimilarityReport> {
    let h = hierarchy
        .ok_or_else(|| Error::UnsupportedMetric("no class hierarchy available".into()))?;
    if h.len() != prototypes.rows() {
        return Err(Error::Shape(format!(
            "hierarchy of {} entries for {} prototypes",
            h.len(),
            prototypes.rows()
        )));
    }
    let mut groups = h.to_vec();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return Err(Error::UnsupportedMetric(
            "at least two superclusters are required".into(),
        ));
    }
    let matrix = cosine_similarity_matrix(prototypes)?;
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..h.len() {
        for j in i + 1..h.len() {
            if h[i] == h[j] {
                within += matrix[(i, j)];
                nw += 1;
            } else {
                across += matrix[(i, j)];
                na += 1;
            }
        }
    }
    if nw == 0 {
        return Err(Error::UnsupportedMetric(
            "every supercluster holds a single class".into(),
        ));
    }
    let within = within / nw as f64;
    let across = across / na as f64;
    Ok(SimilarityReport {
        matrix,
        within,
        across,
        gap: within - across,
    })
}

/// Decimal rendering with 17 significant digits.
pub fn format_sig17(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return format!("{:.16}", 0.0);
    }
    let sci = format!("{x:.16e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .expect("scientific formatting has an exponent");
    let decimals = (16 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt_sig17(x: Option<f64>) -> String {
    x.map(format_sig17).unwrap_or_default()
}

pub const CSV_FIXED_COLUMNS: [&str; 8] = [
    "round",
    "mean_local_top1",
    "mean_local_top5",
    "global_top1",
    "server_loss",
    "mean_client_loss",
    "uplink_floats",
    "downlink_floats",
];

pub fn metrics_csv(history: &[RoundMetrics]) -> String {
    let clients = history.first().map_or(0, |r| r.client_top1.len());
    let mut out = CSV_FIXED_COLUMNS.join(",");
    for c in 0..clients {
        let _ = write!(out, ",client_{c}_top1");
    }
    out.push('\n');
    for r in history {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            format_sig17(r.mean_local_top1),
            format_sig17(r.mean_local_top5),
            opt_sig17(r.global_top1),
            opt_sig17(r.server_loss),
            opt_sig17(r.mean_client_loss),
            r.uplink_floats(),
            r.downlink_floats()
        );
        for acc in &r.client_top1 {
            let _ = write!(out, ",{}", opt_sig17(*acc));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub mode: String,
    pub rounds: usize,
    pub best_mean_local_top1: f64,
    pub best_round: usize,
    pub final_mean_local_top1: f64,
    pub final_mean_local_top5: f64,
    pub final_global_top1: Option<f64>,
    /// Within-minus-across cosine gap of each reported prototype bank.
    pub final_gaps: std::collections::BTreeMap<String, f64>,
    pub total_uplink_floats: u64,
    pub total_downlink_floats: u64,
    pub total_model_uplink_floats: u64,
    pub total_model_downlink_floats: u64,
    pub pfl_mean_best_top1: Option<f64>,
}

/// Best mean local top-1 over all rounds; the earliest round wins ties.
pub fn best_round(history: &[RoundMetrics]) -> Option<(usize, f64)> {
    history.iter().fold(None, |best, r| match best {
        Some((_, acc)) if acc >= r.mean_local_top1 => best,
        _ => Some((r.round, r.mean_local_top1)),
    })
}

pub fn summarize(result: &RunResult, hierarchy: Option<&[usize]>) -> Summary {
    let last = result.history.last().expect("history holds the initial evaluation");
    let (best_round, best) = best_round(&result.history).expect("non-empty history");
    let final_gaps = result
        .banks
        .iter()
        .filter_map(|b| {
            b.similarity(hierarchy)
                .ok()
                .map(|(_, rep)| (b.name.clone(), rep.gap))
        })
        .collect();
    Summary {
        method: result.method.clone(),
        mode: result.mode.clone(),
        rounds: result.history.len() - 1,
        best_mean_local_top1: best,
        best_round,
        final_mean_local_top1: last.mean_local_top1,
        final_mean_local_top5: last.mean_local_top5,
        final_global_top1: last.global_top1,
        final_gaps,
        total_uplink_floats: result.history.iter().map(RoundMetrics::uplink_floats).sum(),
        total_downlink_floats: result.history.iter().map(RoundMetrics::downlink_floats).sum(),
        total_model_uplink_floats: result.model_uplink_floats,
        total_model_downlink_floats: result.model_downlink_floats,
        pfl_mean_best_top1: result.pfl.as_ref().map(|p| p.mean_best_top1),
    }
}

#[derive(Serialize)]
struct SimilarityFile<'a> {
    method: &'a str,
    banks: Vec<SimilarityEntry>,
}

#[derive(Serialize)]
struct SimilarityEntry {
    name: String,
    /// Classes included in the matrix (those with a prototype).
    classes: Vec<usize>,
    matrix: Vec<Vec<f64>>,
    within: Option<f64>,
    across: Option<f64>,
    gap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub similarity_json: PathBuf,
    pub config_echo_json: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

/// Writes `metrics.csv`, `summary.json`, `similarity_{method}.json` and
/// `config_echo.json` into `out_dir`.
pub fn write_outputs(
    result: &RunResult,
    config_echo: &serde_json::Value,
    hierarchy: Option<&[usize]>,
    out_dir: impl AsRef<Path>,
) -> Result<OutputPaths> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = OutputPaths {
        metrics_csv: dir.join("metrics.csv"),
        summary_json: dir.join("summary.json"),
        similarity_json: dir.join(format!("similarity_{}.json", result.method)),
        config_echo_json: dir.join("config_echo.json"),
    };
    write_file(&paths.metrics_csv, &metrics_csv(&result.history))?;
    write_file(&paths.summary_json, &to_pretty(&summarize(result, hierarchy)))?;

    let banks = result
        .banks
        .iter()
        .filter_map(|b| {
            let (classes, sub) = b.present_rows();
            let matrix = cosine_similarity_matrix(&sub).ok()?;
            let report = b.similarity(hierarchy).ok().map(|(_, r)| r);
            Some(SimilarityEntry {
                name: b.name.clone(),
                classes,
                matrix: matrix.row_iter().map(<[f64]>::to_vec).collect(),
                within: report.as_ref().map(|r| r.within),
                across: report.as_ref().map(|r| r.across),
                gap: report.as_ref().map(|r| r.gap),
            })
        })
        .collect();
    write_file(
        &paths.similarity_json,
        &to_pretty(&SimilarityFile {
            method: &result.method,
            banks,
        }),
    )?;
    write_file(&paths.config_echo_json, &to_pretty(config_echo))?;
    Ok(paths)
}
