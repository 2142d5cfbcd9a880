//! Sequential-task pipeline execution with stage checkpointing, resume and
//! report emission.
//!
//! Output layout under the experiment's `out_dir`:
//!
//! ```text
//! tasks/<task_id>/            generated synthetic corpora + task.manifest
//! single/<task_id>/system/    per-task baseline checkpoints
//! single/report.json          single-model per-task scores
//! methods/<method>/stageN/    system/, distilled/, history.json, report.json
//! methods/<method>/curves.jsonl
//! methods/<method>/report.json|report.txt
//! comparison.json|comparison.txt
//! provenance.json
//! ```
//!
//! A stage directory with a `report.json` is complete; `--resume` reloads
//! the newest complete stage and never retrains it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lilt_core::checkpoint::param_checksum;
use lilt_core::report::{
    evaluate_stage, render_comparison, CFReport, CurveLog, CurveRecord, StageReport, TaskBleu,
};
use lilt_core::synth::{gen_task, load_manifest, MANIFEST_NAME};
use lilt_core::trainer::{
    learn_task, load_system, save_system, train_single, EpochDev, LifelongSystemState, Method,
    TaskSpec,
};

use crate::config::{ExperimentConfig, TaskEntry};
use crate::CliError;

fn core_err(e: lilt_core::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Generates every synthetic task directory; a directory whose manifest
/// already matches the requested task is left untouched.
pub fn generate_tasks(config: &ExperimentConfig) -> Result<Vec<String>, CliError> {
    let mut actions = Vec::new();
    for entry in &config.tasks {
        if let TaskEntry::Synthetic(spec) = entry {
            let dir = config.task_dir(entry);
            if dir.join(MANIFEST_NAME).exists() {
                let existing = load_manifest(&dir).map_err(core_err)?;
                if existing == *spec {
                    actions.push(format!("{}: up to date", spec.name));
                    continue;
                }
            }
            gen_task(spec, &dir).map_err(core_err)?;
            actions.push(format!("{}: generated", spec.name));
        }
    }
    Ok(actions)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingleReport {
    pub per_task: Vec<TaskBleu>,
    pub avg: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageProvenance {
    pub model_checksum: String,
    pub distilled_provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunProvenance {
    pub seed: u64,
    pub overrides: BTreeMap<String, String>,
    pub config: serde_json::Value,
    /// method -> stage label -> checksums
    pub stages: BTreeMap<String, BTreeMap<String, StageProvenance>>,
}

fn single_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("single")
}

fn method_dir(config: &ExperimentConfig, method: Method) -> PathBuf {
    config.out_dir.join("methods").join(method.name())
}

/// Trains (or reloads) the per-task single baselines and returns their
/// report.
pub fn run_single_baseline(
    config: &ExperimentConfig,
    resume: bool,
) -> Result<SingleReport, CliError> {
    let dir = single_dir(config);
    let report_path = dir.join("report.json");
    if resume && report_path.exists() {
        let report: SingleReport = serde_json::from_slice(
            &fs::read(&report_path).map_err(|e| CliError::Runtime(e.to_string()))?,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        if report.per_task.len() == config.tasks.len() {
            return Ok(report);
        }
    }
    let mut per_task = Vec::new();
    for (i, entry) in config.tasks.iter().enumerate() {
        let task = config.task_spec(entry)?;
        let hyper = config.hyper_for("single", i + 1);
        let (system, _history) =
            train_single(config.scenario, &config.model.to_config(), &task, &hyper)
                .map_err(core_err)?;
        let mut state = LifelongSystemState::new(config.scenario, config.model.to_config());
        state.many2one_source_indicators = config.many2one_source_indicators;
        state.forward = Some(system);
        state.learned.push(task.clone());
        let row = evaluate_stage(&state, &config.eval_config()).map_err(core_err)?;
        save_system(&state, &dir.join(&task.task_id).join("system")).map_err(core_err)?;
        per_task.push(row.per_task[0].clone());
    }
    let avg = per_task.iter().map(|t| t.bleu).sum::<f64>() / per_task.len() as f64;
    let report = SingleReport { per_task, avg };
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(
        &report_path,
        serde_json::to_vec_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(report)
}

fn stage_label(stage: usize, task: &TaskSpec) -> String {
    format!("stage{stage}-{}", task.task_id)
}

fn method_tag(method: Method) -> &'static str {
    method.name()
}

/// Runs one method over the full task sequence. Returns its report.
pub fn run_method(
    config: &ExperimentConfig,
    method: Method,
    resume: bool,
    provenance: &mut RunProvenance,
) -> Result<CFReport, CliError> {
    let mdir = method_dir(config, method);
    fs::create_dir_all(&mdir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut state = LifelongSystemState::new(config.scenario, config.model.to_config());
    state.many2one_source_indicators = config.many2one_source_indicators;
    let mut cf = CFReport::new(method.name());
    let mut histories: Vec<(String, Vec<EpochDev>)> = Vec::new();

    for (i, entry) in config.tasks.iter().enumerate() {
        let stage = i + 1;
        let task = config.task_spec(entry)?;
        let label = stage_label(stage, &task);
        let stage_dir = mdir.join(format!("stage{stage}"));
        let report_path = stage_dir.join("report.json");

        if resume && report_path.exists() {
            state = load_system(&stage_dir.join("system")).map_err(core_err)?;
            state.many2one_source_indicators = config.many2one_source_indicators;
            cf = CFReport::load_json(&report_path).map_err(core_err)?;
            let history: Vec<EpochDev> = serde_json::from_slice(
                &fs::read(stage_dir.join("history.json"))
                    .map_err(|e| CliError::Runtime(e.to_string()))?,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            histories.push((label.clone(), history));
            record_stage_provenance(provenance, method, &label, &stage_dir, &state)?;
            continue;
        }

        let mut hyper = config.hyper_for(method_tag(method), stage);
        hyper.distill_save_dir = Some(stage_dir.join("distilled"));
        let out = learn_task(state, &task, method, &hyper)
            .map_err(|e| CliError::Runtime(format!("{} stage {stage}: {e}", method.name())))?;
        state = out.state;
        let row: StageReport = evaluate_stage(&state, &config.eval_config()).map_err(core_err)?;
        cf.stages.push(row);
        histories.push((label.clone(), out.history.clone()));

        save_system(&state, &stage_dir.join("system")).map_err(core_err)?;
        fs::write(
            stage_dir.join("history.json"),
            serde_json::to_vec_pretty(&out.history)
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        // report.json written last: it marks the stage complete
        cf.save_json(&report_path).map_err(core_err)?;
        record_stage_provenance(provenance, method, &label, &stage_dir, &state)?;
    }

    // curves are regenerated from the per-stage histories, stage order
    let mut curves = CurveLog::new();
    for (label, history) in &histories {
        for epoch_dev in history {
            curves.append(CurveRecord {
                stage: label.clone(),
                epoch: epoch_dev.epoch,
                dev_bleu: epoch_dev.per_task.clone(),
            });
        }
    }
    curves.save_jsonl(&mdir.join("curves.jsonl")).map_err(core_err)?;
    cf.save_json(&mdir.join("report.json")).map_err(core_err)?;
    Ok(cf)
}

fn record_stage_provenance(
    provenance: &mut RunProvenance,
    method: Method,
    label: &str,
    stage_dir: &Path,
    state: &LifelongSystemState,
) -> Result<(), CliError> {
    let model_checksum = state
        .forward
        .as_ref()
        .map(|f| param_checksum(&f.model))
        .unwrap_or_default();
    let distilled_provenance = {
        let path = stage_dir.join("distilled").join("provenance.json");
        if path.exists() {
            Some(
                serde_json::from_slice(
                    &fs::read(&path).map_err(|e| CliError::Runtime(e.to_string()))?,
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?,
            )
        } else {
            None
        }
    };
    provenance
        .stages
        .entry(method.name().to_string())
        .or_default()
        .insert(label.to_string(), StageProvenance { model_checksum, distilled_provenance });
    Ok(())
}

/// Builds the single-baseline row as a pseudo-report for the comparison
/// table.
fn single_as_report(single: &SingleReport) -> CFReport {
    let mut cf = CFReport::new("single");
    cf.stages.push(StageReport {
        stage: single.per_task.len(),
        trained_task: single
            .per_task
            .last()
            .map(|t| t.task_id.clone())
            .unwrap_or_default(),
        per_task: single.per_task.clone(),
        bleu_avg: single.avg,
    });
    cf.set_single_baseline(single.avg);
    cf
}

/// Full experiment: synthetic generation, single baselines, every method,
/// comparison emission. Returns the comparison text.
pub fn run_experiment(
    config: &ExperimentConfig,
    method_filter: Option<&[Method]>,
    resume: bool,
    overrides: BTreeMap<String, String>,
) -> Result<String, CliError> {
    generate_tasks(config)?;
    let mut provenance = RunProvenance {
        seed: config.seed,
        overrides,
        config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?,
        stages: BTreeMap::new(),
    };

    let single = if config.include_single {
        Some(run_single_baseline(config, resume)?)
    } else {
        None
    };

    let methods: Vec<Method> = match method_filter {
        Some(filter) => config
            .methods
            .iter()
            .copied()
            .filter(|m| filter.contains(m))
            .collect(),
        None => config.methods.clone(),
    };
    if methods.is_empty() {
        return Err(CliError::Config("no methods left after --method filtering".into()));
    }

    let mut reports = Vec::new();
    for method in methods {
        let mut cf = run_method(config, method, resume, &mut provenance)?;
        if let Some(single) = &single {
            cf.set_single_baseline(single.avg);
            cf.save_json(&method_dir(config, method).join("report.json")).map_err(core_err)?;
        }
        fs::write(
            method_dir(config, method).join("report.txt"),
            render_comparison(&[&cf]),
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        reports.push(cf);
    }

    fs::write(
        config.out_dir.join("provenance.json"),
        serde_json::to_vec_pretty(&provenance).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    render_run_reports(&config.out_dir, single.as_ref(), &reports)
}

fn render_run_reports(
    out_dir: &Path,
    single: Option<&SingleReport>,
    reports: &[CFReport],
) -> Result<String, CliError> {
    let mut rows: Vec<CFReport> = Vec::new();
    if let Some(s) = single {
        rows.push(single_as_report(s));
    }
    rows.extend(reports.iter().cloned());
    let refs: Vec<&CFReport> = rows.iter().collect();
    let text = render_comparison(&refs);
    fs::write(out_dir.join("comparison.txt"), &text)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(
        out_dir.join("comparison.json"),
        serde_json::to_vec_pretty(&rows).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(text)
}

/// Re-renders comparison tables and returns the text (the `report`
/// subcommand).
pub fn report_run(out_dir: &Path) -> Result<String, CliError> {
    let single_path = out_dir.join("single").join("report.json");
    let single: Option<SingleReport> = if single_path.exists() {
        Some(
            serde_json::from_slice(
                &fs::read(&single_path).map_err(|e| CliError::Runtime(e.to_string()))?,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?,
        )
    } else {
        None
    };
    let methods_root = out_dir.join("methods");
    let mut reports = Vec::new();
    if methods_root.exists() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&methods_root)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let path = dir.join("report.json");
            if path.exists() {
                reports.push(CFReport::load_json(&path).map_err(core_err)?);
            } else {
                // partial run: reconstruct from the newest complete stage
                let mut stage_reports: Vec<PathBuf> = fs::read_dir(&dir)
                    .map_err(|e| CliError::Runtime(e.to_string()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.join("report.json").exists())
                    .collect();
                stage_reports.sort();
                if let Some(last) = stage_reports.last() {
                    reports.push(CFReport::load_json(&last.join("report.json")).map_err(core_err)?);
                }
            }
        }
    }
    if single.is_none() && reports.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no completed runs",
            out_dir.display()
        )));
    }
    render_run_reports(out_dir, single.as_ref(), &reports)
}
