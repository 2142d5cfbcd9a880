//! Forgetting reports and per-epoch curve logs.
//!
//! After every learning stage the system is scored on every learned
//! task's test set; a [`CFReport`] collects those rows per method, with
//! BLEU-avg and the delta against the single-model baseline. Curves are
//! append-only JSON-lines records, one per (stage, epoch), sufficient to
//! regenerate per-epoch dev-BLEU plots.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bleu::{corpus_bleu, exact_match};
use crate::corpus::Sentence;
use crate::decoding::{decode_corpus, strip_eos, DecodeConfig};
use crate::error::{Error, Result};
use crate::trainer::{LifelongSystemState, SystemModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBleu {
    pub task_id: String,
    pub bleu: f64,
    /// Sentence-level exact match (auxiliary; exact oracle exists only on
    /// synthetic tasks).
    pub exact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 1-based stage index; the row reflects the system right after
    /// learning `trained_task`.
    pub stage: usize,
    pub trained_task: String,
    pub per_task: Vec<TaskBleu>,
    pub bleu_avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CFReport {
    pub method: String,
    pub stages: Vec<StageReport>,
    /// Final BLEU-avg of the single-model baseline, when available.
    pub single_avg: Option<f64>,
    /// Final stage BLEU-avg minus `single_avg`.
    pub delta_vs_single: Option<f64>,
}

impl CFReport {
    pub fn new(method: impl Into<String>) -> Self {
        CFReport { method: method.into(), stages: Vec::new(), single_avg: None, delta_vs_single: None }
    }

    pub fn final_stage(&self) -> Option<&StageReport> {
        self.stages.last()
    }

    pub fn final_avg(&self) -> Option<f64> {
        self.final_stage().map(|s| s.bleu_avg)
    }

    pub fn set_single_baseline(&mut self, single_avg: f64) {
        self.single_avg = Some(single_avg);
        self.delta_vs_single = self.final_avg().map(|avg| avg - single_avg);
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Decodes one task's test set with the given config and scores it.
fn score_task(
    system: &SystemModel,
    state: &LifelongSystemState,
    task: &crate::trainer::TaskSpec,
    decode: &DecodeConfig,
) -> Result<TaskBleu> {
    let test = state.tag_corpus(&task.load_split("test")?)?;
    let sources: Vec<Vec<usize>> = test.sources().map(|s| system.src_vocab.encode(s)).collect();
    let decoded = decode_corpus(&system.model, &sources, decode)?;
    let candidates: Vec<Sentence> = decoded
        .iter()
        .map(|d| system.tgt_vocab.decode(strip_eos(&d.tokens)))
        .collect::<Result<Vec<_>>>()?;
    let references: Vec<Sentence> = test.targets().cloned().collect();
    Ok(TaskBleu {
        task_id: task.task_id.clone(),
        bleu: corpus_bleu(&candidates, &references)?.bleu,
        exact: exact_match(&candidates, &references)?,
    })
}

/// Scores every learned task's test set (arrival order) and aggregates.
pub fn evaluate_stage(state: &LifelongSystemState, decode: &DecodeConfig) -> Result<StageReport> {
    let system = state
        .forward
        .as_ref()
        .ok_or_else(|| Error::Corpus("no model learned yet".into()))?;
    let mut per_task = Vec::with_capacity(state.learned.len());
    for task in &state.learned {
        per_task.push(score_task(system, state, task, decode)?);
    }
    let bleu_avg = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().map(|t| t.bleu).sum::<f64>() / per_task.len() as f64
    };
    Ok(StageReport {
        stage: state.learned.len(),
        trained_task: state
            .learned
            .last()
            .map(|t| t.task_id.clone())
            .unwrap_or_default(),
        per_task,
        bleu_avg,
    })
}

/// One per-epoch record of dev BLEU per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub stage: String,
    pub epoch: usize,
    pub dev_bleu: Vec<(String, f64)>,
}

/// Append-only curve log with JSON-lines persistence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveLog {
    records: Vec<CurveRecord>,
}

impl CurveLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: CurveRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[CurveRecord] {
        &self.records
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = fs::File::create(path)?;
        for r in &self.records {
            serde_json::to_writer(&mut file, r)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut log = CurveLog::new();
        for line in text.lines() {
            if !line.trim().is_empty() {
                log.append(serde_json::from_str(line)?);
            }
        }
        Ok(log)
    }
}

/// Renders a fixed-width comparison table across methods: one row per
/// method with final-stage per-task BLEU, BLEU-avg and delta.
pub fn render_comparison(reports: &[&CFReport]) -> String {
    let task_ids: Vec<String> = reports
        .iter()
        .filter_map(|r| r.final_stage())
        .next()
        .map(|s| s.per_task.iter().map(|t| t.task_id.clone()).collect())
        .unwrap_or_default();
    let mut out = String::new();
    out.push_str(&format!("{:<24}", "method"));
    for id in &task_ids {
        out.push_str(&format!("{id:>14}"));
    }
    out.push_str(&format!("{:>12}{:>9}\n", "BLEU-avg", "delta"));
    for report in reports {
        out.push_str(&format!("{:<24}", report.method));
        if let Some(stage) = report.final_stage() {
            for t in &stage.per_task {
                out.push_str(&format!("{:>14.2}", t.bleu));
            }
            out.push_str(&format!("{:>12.2}", stage.bleu_avg));
        }
        match report.delta_vs_single {
            Some(d) => out.push_str(&format!("{d:>+9.2}\n")),
            None => out.push_str(&format!("{:>9}\n", "~")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(avgs: &[(&str, f64)]) -> CFReport {
        let mut r = CFReport::new("probe");
        r.stages.push(StageReport {
            stage: 1,
            trained_task: "t1".into(),
            per_task: avgs
                .iter()
                .map(|(id, b)| TaskBleu { task_id: id.to_string(), bleu: *b, exact: 0.0 })
                .collect(),
            bleu_avg: avgs.iter().map(|(_, b)| b).sum::<f64>() / avgs.len() as f64,
        });
        r
    }

    #[test]
    fn bleu_avg_is_mean_of_tasks() {
        let r = report_with(&[("t1", 90.0), ("t2", 70.0), ("t3", 80.0)]);
        let stage = r.final_stage().unwrap();
        let mean = stage.per_task.iter().map(|t| t.bleu).sum::<f64>() / 3.0;
        assert!((stage.bleu_avg - mean).abs() < 1e-9);
    }

    #[test]
    fn delta_of_single_vs_itself_is_zero() {
        let mut r = report_with(&[("t1", 88.0)]);
        let own = r.final_avg().unwrap();
        r.set_single_baseline(own);
        assert_eq!(r.delta_vs_single, Some(0.0));
    }

    #[test]
    fn report_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report_with(&[("t1", 90.0), ("t2", 70.0)]);
        r.set_single_baseline(75.0);
        let path = dir.path().join("report.json");
        r.save_json(&path).unwrap();
        assert_eq!(CFReport::load_json(&path).unwrap(), r);
    }

    #[test]
    fn curve_log_roundtrips_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = CurveLog::new();
        for stage in 1..=2 {
            for epoch in 1..=3 {
                log.append(CurveRecord {
                    stage: format!("stage{stage}"),
                    epoch,
                    dev_bleu: vec![("t1".into(), stage as f64 * 10.0 + epoch as f64)],
                });
            }
        }
        let path = dir.path().join("curves.jsonl");
        log.save_jsonl(&path).unwrap();
        let back = CurveLog::load_jsonl(&path).unwrap();
        assert_eq!(back, log);
        // monotone in (stage, epoch) as appended
        let mut prev = (String::new(), 0usize);
        for r in back.records() {
            assert!((r.stage.clone(), r.epoch) > prev);
            prev = (r.stage.clone(), r.epoch);
        }
    }

    #[test]
    fn comparison_table_alignment() {
        let mut a = report_with(&[("t1", 90.0), ("t2", 80.0)]);
        a.set_single_baseline(84.0);
        let text = render_comparison(&[&a]);
        assert!(text.contains("BLEU-avg"));
        assert!(text.contains("85.00"));
        assert!(text.contains("+1.00"));
    }
}
