use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, ItemResult, Score, SystemDescriptor};
use crate::metrics::{aggregate_clip, modality_accuracy, ModalityConfusion};
use crate::model::Modality;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MISSING_CELL: &str = "-";

/// Aggregate scores in the benchmark's column shape. Holds no timings so
/// that identical runs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub system: SystemDescriptor,
    pub config_digest: String,
    pub corpus_digest: String,
    pub n_items: usize,
    pub items_per_modality: BTreeMap<Modality, usize>,
    pub include_text_ground: bool,
    pub penalize_mismatch: bool,
    pub modality_accuracy: Option<f64>,
    pub confusion: ModalityConfusion,
    pub clip_mean: Option<f64>,
    pub clip_missing: usize,
    pub fid: Option<f64>,
    pub qa_accuracy: Option<f64>,
    pub speech_bleu: Option<f64>,
    /// Why each absent score is absent.
    pub absent: BTreeMap<String, String>,
    pub parse_fallbacks: usize,
    pub backend_errors: usize,
    pub llm_calls: u64,
}

/// One ledger line per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: String,
    pub ground: Modality,
    pub predicted: Option<Modality>,
    pub gated: bool,
    pub fell_back_to_text: bool,
    pub llm_calls: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<Score>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<Score>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa: Option<Score>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Worst-case value recorded for gated-out items.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentinel: Option<f64>,
}

/// Outcome of the batch FID computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FidOutcome {
    Value { fid: f64 },
    Absent { reason: String },
}

pub struct AggregateOptions {
    pub include_text_ground: bool,
    pub penalize_mismatch: bool,
}

fn mean_in_order(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Folds item results into a report. Items are processed in id order, so
/// corpus order never changes the result.
pub fn aggregate(
    items: &[ItemResult],
    fid: &FidOutcome,
    system: &SystemDescriptor,
    corpus_digest: &str,
    opts: &AggregateOptions,
) -> (EvalReport, Vec<LedgerEntry>) {
    let mut sorted: Vec<&ItemResult> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut absent = BTreeMap::new();
    let pairs: Vec<(Modality, Option<Modality>)> = sorted.iter().map(|i| (i.ground, i.predicted)).collect();
    let (accuracy, confusion) = match modality_accuracy(&pairs, opts.include_text_ground) {
        Ok((a, c)) => (Some(a), c),
        Err(e) => {
            absent.insert("modality_accuracy".to_string(), e.to_string());
            let (_, c) = modality_accuracy(&pairs, true).unwrap_or_default();
            (None, c)
        }
    };

    let mut clip: Vec<Option<f64>> = Vec::new();
    let mut bleu: Vec<f64> = Vec::new();
    let mut qa: Vec<f64> = Vec::new();
    let mut ledger = Vec::with_capacity(sorted.len());
    let mut per_modality = BTreeMap::new();
    for item in &sorted {
        *per_modality.entry(item.ground).or_insert(0) += 1;
        let gated = item.predicted == Some(item.ground);
        let penalty = (!gated && opts.penalize_mismatch).then_some(0.0);
        let pick = |s: &Option<Score>| -> Option<Option<f64>> {
            match s {
                None => None,
                Some(Score::Gated) => penalty.map(Some),
                Some(Score::Value { value }) => Some(Some(*value)),
                Some(Score::Missing { .. }) => Some(None),
            }
        };
        if let Some(v) = pick(&item.clip) {
            clip.push(v);
        }
        if let Some(Some(v)) = pick(&item.bleu) {
            bleu.push(v);
        }
        if let Some(Some(v)) = pick(&item.qa) {
            qa.push(v);
        }
        ledger.push(LedgerEntry {
            id: item.id.clone(),
            ground: item.ground,
            predicted: item.predicted,
            gated,
            fell_back_to_text: item.fell_back_to_text,
            llm_calls: item.llm_calls,
            clip: item.clip.clone(),
            bleu: item.bleu.clone(),
            qa: item.qa.clone(),
            error: item.error.clone(),
            sentinel: (!gated).then_some(0.0),
        });
    }

    let (clip_mean, clip_missing) = match aggregate_clip(&clip) {
        Ok((m, missing)) => (Some(m), missing),
        Err(e) => {
            absent.insert("clip".into(), format!("{e} ({} image items)", clip.len()));
            (None, clip.len())
        }
    };
    let speech_bleu = mean_in_order(&bleu);
    if speech_bleu.is_none() {
        absent.insert("speech_bleu".into(), "no speech item passed the eligibility gate".into());
    }
    let qa_accuracy = mean_in_order(&qa);
    if qa_accuracy.is_none() {
        absent.insert("qa".into(), "no QA item passed the eligibility gate".into());
    }
    let fid_value = match fid {
        FidOutcome::Value { fid } => Some(*fid),
        FidOutcome::Absent { reason } => {
            absent.insert("fid".into(), reason.clone());
            None
        }
    };

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        system: system.clone(),
        config_digest: system.digest(),
        corpus_digest: corpus_digest.to_string(),
        n_items: sorted.len(),
        items_per_modality: per_modality,
        include_text_ground: opts.include_text_ground,
        penalize_mismatch: opts.penalize_mismatch,
        modality_accuracy: accuracy,
        confusion,
        clip_mean,
        clip_missing,
        fid: fid_value,
        qa_accuracy,
        speech_bleu,
        absent,
        parse_fallbacks: sorted.iter().filter(|i| i.fell_back_to_text).count(),
        backend_errors: sorted.iter().filter(|i| i.error.is_some()).count(),
        llm_calls: sorted.iter().map(|i| i.llm_calls as u64).sum(),
    };
    (report, ledger)
}

pub const COLUMNS: [&str; 5] = ["Modality Acc. (%)", "CLIP", "FID", "QA", "BLEU"];

impl EvalReport {
    /// Values in column order: accuracy and QA as percentages.
    pub fn columns(&self) -> [Option<f64>; 5] {
        [
            self.modality_accuracy.map(|a| a * 100.0),
            self.clip_mean,
            self.fid,
            self.qa_accuracy.map(|a| a * 100.0),
            self.speech_bleu,
        ]
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| System | {} |", COLUMNS.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(COLUMNS.len()));
        let _ = writeln!(out, "| {} | {} |", self.system.name, format_cells(&self.columns()).join(" | "));
        if !self.absent.is_empty() {
            out.push('\n');
            for (metric, reason) in &self.absent {
                let _ = writeln!(out, "- {metric}: {reason}");
            }
        }
        out
    }
}

pub(crate) fn format_cells(values: &[Option<f64>; 5]) -> Vec<String> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            None => MISSING_CELL.to_string(),
            Some(v) if i == 4 => format!("{v:.3}"),
            Some(v) => format!("{v:.1}"),
        })
        .collect()
}

/// Writes `report.json`, `report.md` and `ledger.jsonl` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, ledger: &[LedgerEntry]) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(report).expect("serializable");
    json.push('\n');
    let path = dir.join("report.json");
    std::fs::write(&path, json).map_err(|e| EvalError::io(&path, e))?;
    let path = dir.join("report.md");
    std::fs::write(&path, report.to_markdown()).map_err(|e| EvalError::io(&path, e))?;
    let mut lines = String::new();
    for entry in ledger {
        lines.push_str(&serde_json::to_string(entry).expect("serializable"));
        lines.push('\n');
    }
    let path = dir.join("ledger.jsonl");
    std::fs::write(&path, lines).map_err(|e| EvalError::io(&path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Report {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system: String,
    pub values: [Option<f64>; 5],
    /// 1-based rank per column; FID ranks ascending, the rest descending.
    pub ranks: [Option<usize>; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Columns some but not all systems report.
    pub partial_columns: Vec<String>,
}

/// Side-by-side table ordered by modality accuracy (missing last, input
/// order on ties).
pub fn compare_systems(reports: &[EvalReport]) -> Result<Comparison, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::InvalidJob("comparison needs at least two reports".into()));
    }
    let version = reports[0].schema_version;
    if let Some(r) = reports.iter().find(|r| r.schema_version != version) {
        return Err(EvalError::SchemaMismatch {
            expected: version,
            found: r.schema_version,
            system: r.system.name.clone(),
        });
    }
    let values: Vec<[Option<f64>; 5]> = reports.iter().map(EvalReport::columns).collect();
    let mut ranks = vec![[None; 5]; reports.len()];
    for col in 0..5 {
        let mut present: Vec<(usize, f64)> = values.iter().enumerate().filter_map(|(i, v)| v[col].map(|x| (i, x))).collect();
        present.sort_by(|a, b| {
            let ord = if col == 2 { a.1.total_cmp(&b.1) } else { b.1.total_cmp(&a.1) };
            ord.then(a.0.cmp(&b.0))
        });
        for (rank, (i, _)) in present.iter().enumerate() {
            ranks[*i][col] = Some(rank + 1);
        }
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| (ranks[i][0].unwrap_or(usize::MAX), i));
    let partial_columns = (0..5)
        .filter(|&c| {
            let n = values.iter().filter(|v| v[c].is_some()).count();
            n > 0 && n < values.len()
        })
        .map(|c| COLUMNS[c].to_string())
        .collect();
    Ok(Comparison {
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows: order
            .into_iter()
            .map(|i| ComparisonRow {
                system: reports[i].system.name.clone(),
                values: values[i],
                ranks: ranks[i],
            })
            .collect(),
        partial_columns,
    })
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| System | {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.columns.len()));
        for row in &self.rows {
            let _ = writeln!(out, "| {} | {} |", row.system, format_cells(&row.values).join(" | "));
        }
        if !self.partial_columns.is_empty() {
            let _ = writeln!(out, "\nNot reported by every system: {}", self.partial_columns.join(", "));
        }
        out
    }
}
