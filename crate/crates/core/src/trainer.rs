//! Continual-learning strategies over a growing task sequence.
//!
//! [`train_mixture`] is the shared trainer: maximum likelihood over the
//! concatenation of weighted corpora, seeded shuffling per epoch,
//! length-bucketed batches under a token budget, optional quadratic
//! parameter-anchoring penalty, per-epoch dev BLEU and best-checkpoint
//! selection. [`learn_task`] wires it to the method-specific
//! distillation-set builders and the vocabulary-union/model-growth step.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bleu::corpus_bleu;
use crate::checkpoint::{load_checkpoint, param_checksum, save_checkpoint};
use crate::corpus::{Lang, ParallelCorpus, Sentence};
use crate::decoding::{decode_corpus, strip_eos, DecodeConfig, DecodeMode};
use crate::distill::{
    build_many2one_distill_set, build_one2many_distill_set, build_reverse_distill_set,
    DistillKind, DistilledSet, Teacher,
};
use crate::error::{Error, Result};
use crate::model::{Batch, FisherDiag, Gradients, ModelConfig, ModelState};
use crate::optim::{OptimizerState, Schedule};
use crate::synth::derive_seed;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    OneToMany,
    ManyToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Joint,
    Ewc,
    MultiDistill,
    DirectDistill,
    PseudoDistill,
    ReverseDistill,
}

impl Method {
    pub fn compatible_with(self, scenario: Scenario) -> bool {
        match self {
            Method::Finetune | Method::Joint | Method::Ewc => true,
            Method::MultiDistill => scenario == Scenario::OneToMany,
            Method::DirectDistill | Method::PseudoDistill | Method::ReverseDistill => {
                scenario == Scenario::ManyToOne
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Ewc => "ewc",
            Method::MultiDistill => "multi_distill",
            Method::DirectDistill => "direct_distill",
            Method::PseudoDistill => "pseudo_distill",
            Method::ReverseDistill => "reverse_distill",
        }
    }
}

/// One translation task: language pair plus the directory holding its
/// `train`/`dev`/`test` file pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub dir: PathBuf,
}

impl TaskSpec {
    pub fn load_split(&self, split: &str) -> Result<ParallelCorpus> {
        let stem = self.dir.join(split);
        if !stem.with_extension(self.src_lang.as_str()).exists() {
            return Err(Error::MissingSplit {
                task: self.task_id.clone(),
                split: match split {
                    "train" => "train",
                    "dev" => "dev",
                    _ => "test",
                },
            });
        }
        ParallelCorpus::load(&stem, &self.src_lang, &self.tgt_lang)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    /// Padded-token budget per batch.
    pub batch_tokens: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub ewc_lambda: f64,
    pub fisher_sample_cap: usize,
    /// Per-language vocabulary truncation at build time.
    pub max_vocab: usize,
    /// Decode settings for distillation-set construction.
    pub distill_decode: DecodeConfig,
    /// Decode settings for per-epoch dev scoring (greedy keeps it cheap).
    pub dev_decode: DecodeConfig,
    pub select_best_by_dev: bool,
    /// When set, distillation sets are persisted here as corpus files plus
    /// their provenance manifest.
    #[serde(default)]
    pub distill_save_dir: Option<PathBuf>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 12,
            batch_tokens: 2048,
            schedule: Schedule::default(),
            seed: 0,
            ewc_lambda: 100.0,
            fisher_sample_cap: 1000,
            max_vocab: 30_000,
            distill_decode: DecodeConfig::default(),
            dev_decode: DecodeConfig { mode: DecodeMode::Greedy, beam_size: 1, ..Default::default() },
            select_best_by_dev: true,
            distill_save_dir: None,
        }
    }
}

/// A model with the vocabularies its embeddings are aligned to.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub model: ModelState<f32>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

/// Dev corpora (sources already tagged) used for curves and selection.
#[derive(Clone, Debug)]
pub struct DevSet {
    pub task_id: String,
    pub corpus: ParallelCorpus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochDev {
    pub epoch: usize,
    pub per_task: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelState<f32>,
    pub history: Vec<EpochDev>,
    pub best_epoch: Option<usize>,
}

struct Example {
    src: Vec<usize>,
    tgt: Vec<usize>,
    weight: f64,
}

fn build_examples(
    corpora: &[ParallelCorpus],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Vec<Example> {
    let mut out = Vec::new();
    for corpus in corpora {
        for (src, tgt) in &corpus.pairs {
            if tgt.is_empty() {
                continue; // degenerate teacher decode; nothing to learn from
            }
            let src_ids = src_vocab.encode(src);
            let tgt_ids = tgt_vocab.encode(tgt);
            if src_ids.len() + 1 > max_len || tgt_ids.len() + 1 > max_len {
                continue;
            }
            out.push(Example { src: src_ids, tgt: tgt_ids, weight: corpus.weight });
        }
    }
    out
}

/// Seeded shuffle, stable length sort, token-budget chunking, then a
/// seeded shuffle of batch order.
fn make_batches(examples: &[Example], budget: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.sort_by_key(|&i| examples[i].src.len() + examples[i].tgt.len());

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut max_src = 0usize;
    let mut max_tgt = 0usize;
    for &i in &order {
        let s = examples[i].src.len() + 1;
        let t = examples[i].tgt.len() + 1;
        let new_max_src = max_src.max(s);
        let new_max_tgt = max_tgt.max(t);
        let cost = (current.len() + 1) * (new_max_src + new_max_tgt);
        if !current.is_empty() && cost > budget {
            batches.push(std::mem::take(&mut current));
            max_src = 0;
            max_tgt = 0;
        }
        max_src = max_src.max(s);
        max_tgt = max_tgt.max(t);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }
    batches
}

/// Loss value with the quadratic anchoring penalty added:
/// `base + (lambda/2) * sum_i F_i (theta_i - theta*_i)^2`.
pub fn ewc_loss(model: &ModelState<f32>, fisher: &FisherDiag<f32>, lambda: f64, base: f64) -> Result<f64> {
    if !fisher.shapes_match(model) {
        return Err(Error::ShapeMismatch("fisher store vs model".into()));
    }
    let mut penalty = 0.0f64;
    for ((p, f), a) in model.params().iter().zip(&fisher.diag).zip(&fisher.anchor) {
        for ((&pi, &fi), &ai) in p.as_slice().iter().zip(f.as_slice()).zip(a.as_slice()) {
            let d = (pi - ai) as f64;
            penalty += fi as f64 * d * d;
        }
    }
    Ok(base + 0.5 * lambda * penalty)
}

/// Adds the penalty gradient `lambda * F_i * (theta_i - theta*_i)` in place.
pub fn add_ewc_grads(
    model: &ModelState<f32>,
    fisher: &FisherDiag<f32>,
    lambda: f64,
    grads: &mut Gradients<f32>,
) -> Result<()> {
    if !fisher.shapes_match(model) {
        return Err(Error::ShapeMismatch("fisher store vs model".into()));
    }
    let lambda = lambda as f32;
    for ((g, p), (f, a)) in grads
        .iter_mut()
        .zip(model.params())
        .zip(fisher.diag.iter().zip(&fisher.anchor))
    {
        for (((gi, &pi), &fi), &ai) in g
            .as_mut_slice()
            .iter_mut()
            .zip(p.as_slice())
            .zip(f.as_slice())
            .zip(a.as_slice())
        {
            *gi += lambda * fi * (pi - ai);
        }
    }
    Ok(())
}

/// Diagonal empirical Fisher: mean over at most `sample_cap` pairs of the
/// element-wise squared gradient of the sentence negative log-likelihood
/// (unsmoothed, summed over target tokens). The anchor snapshots the
/// model's current parameters.
pub fn compute_fisher(
    model: &ModelState<f32>,
    corpus: &ParallelCorpus,
    vocabs: (&Vocabulary, &Vocabulary),
    sample_cap: usize,
) -> Result<FisherDiag<f32>> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let plain = model.with_label_smoothing(0.0);
    let examples = build_examples(
        std::slice::from_ref(corpus),
        vocabs.0,
        vocabs.1,
        model.config().max_len,
    );
    let n = examples.len().min(sample_cap);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let chunks: Vec<&[Example]> = examples[..n].chunks(16).collect();
    let partials: Vec<Result<Vec<crate::tensor::Matrix<f32>>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut acc: Option<Vec<crate::tensor::Matrix<f32>>> = None;
            for ex in *chunk {
                let batch = Batch {
                    src: vec![ex.src.clone()],
                    tgt: vec![ex.tgt.clone()],
                    weights: vec![1.0],
                };
                let (info, grads) = plain.loss_and_grads(&batch, None)?;
                // mean-per-token gradients scale back to sentence sums
                let tokens = info.tokens as f32;
                match &mut acc {
                    None => {
                        acc = Some(
                            grads
                                .into_iter()
                                .map(|mut g| {
                                    g.as_mut_slice().iter_mut().for_each(|x| {
                                        let s = *x * tokens;
                                        *x = s * s;
                                    });
                                    g
                                })
                                .collect(),
                        )
                    }
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            for (ai, &gi) in a.as_mut_slice().iter_mut().zip(g.as_slice()) {
                                let s = gi * tokens;
                                *ai += s * s;
                            }
                        }
                    }
                }
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect();

    let mut fisher = FisherDiag::zeros_like(model);
    for partial in partials {
        let partial = partial?;
        for (f, p) in fisher.diag.iter_mut().zip(partial) {
            for (fi, &pi) in f.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *fi += pi;
            }
        }
    }
    let inv_n = 1.0 / n as f32;
    for f in &mut fisher.diag {
        f.as_mut_slice().iter_mut().for_each(|x| *x *= inv_n);
    }
    fisher.sample_count = n as u64;
    Ok(fisher)
}

/// Greedy dev BLEU per task.
pub fn dev_bleu(
    model: &ModelState<f32>,
    vocabs: (&Vocabulary, &Vocabulary),
    dev: &[DevSet],
    decode: &DecodeConfig,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(dev.len());
    for set in dev {
        let sources: Vec<Vec<usize>> =
            set.corpus.sources().map(|s| vocabs.0.encode(s)).collect();
        let decoded = decode_corpus(model, &sources, decode)?;
        let candidates: Vec<Sentence> = decoded
            .iter()
            .map(|d| vocabs.1.decode(strip_eos(&d.tokens)))
            .collect::<Result<Vec<_>>>()?;
        let references: Vec<Sentence> = set.corpus.targets().cloned().collect();
        out.push((set.task_id.clone(), corpus_bleu(&candidates, &references)?.bleu));
    }
    Ok(out)
}

/// Penalty context for EWC training.
pub struct EwcPenalty<'a> {
    pub fisher: &'a FisherDiag<f32>,
    pub lambda: f64,
}

/// Maximum-likelihood training over the concatenation of weighted corpora.
///
/// Every pair is weighted by its corpus weight; batches are rebuilt and
/// reshuffled each epoch from a seeded stream. With `select_best_by_dev`
/// the returned model is the epoch snapshot with the highest mean dev
/// BLEU, ties to the earlier epoch.
pub fn train_mixture(
    model: ModelState<f32>,
    corpora: &[ParallelCorpus],
    vocabs: (&Vocabulary, &Vocabulary),
    hyper: &TrainHyper,
    dev: &[DevSet],
    ewc: Option<EwcPenalty<'_>>,
) -> Result<TrainOutcome> {
    if corpora.is_empty() || corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::EmptyBatch);
    }
    for corpus in corpora {
        if corpus.weight <= 0.0 || !corpus.weight.is_finite() {
            return Err(Error::Corpus(format!("corpus weight {} must be positive", corpus.weight)));
        }
        for (src, _) in &corpus.pairs {
            // content tokens may legitimately be OOV (they encode to UNK);
            // indicators must be known to the model
            if let Some(ind) = src.indicator() {
                if !vocabs.0.contains(ind.as_str()) {
                    return Err(Error::UnknownIndicator(ind.as_str().to_string()));
                }
            }
        }
    }
    let examples = build_examples(corpora, vocabs.0, vocabs.1, model.config().max_len);
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut model = model;
    let mut opt = OptimizerState::new(&model, hyper.schedule);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, &["dropout"]));
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, ModelState<f32>)> = None;

    for epoch in 1..=hyper.epochs {
        let mut batch_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, &["epoch", &epoch.to_string()]));
        let batches = make_batches(&examples, hyper.batch_tokens, &mut batch_rng);
        for batch_ids in &batches {
            let batch = Batch {
                src: batch_ids.iter().map(|&i| examples[i].src.clone()).collect(),
                tgt: batch_ids.iter().map(|&i| examples[i].tgt.clone()).collect(),
                weights: batch_ids.iter().map(|&i| examples[i].weight).collect(),
            };
            let (info, mut grads) = model.loss_and_grads(&batch, Some(&mut dropout_rng))?;
            if !info.loss.is_finite() {
                return Err(Error::NonFinite { what: "loss".into(), step: opt.step() + 1 });
            }
            if let Some(p) = &ewc {
                add_ewc_grads(&model, p.fisher, p.lambda, &mut grads)?;
            }
            opt.apply_update(&mut model, &grads)?;
            if !model.all_finite() {
                return Err(Error::NonFinite { what: "parameters".into(), step: opt.step() });
            }
        }
        if !dev.is_empty() {
            let scores = dev_bleu(&model, vocabs, dev, &hyper.dev_decode)?;
            let mean = scores.iter().map(|(_, b)| b).sum::<f64>() / scores.len() as f64;
            history.push(EpochDev { epoch, per_task: scores });
            if hyper.select_best_by_dev {
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => mean > *b,
                };
                if better {
                    best = Some((mean, epoch, model.clone()));
                }
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, snapshot)) => (snapshot, Some(epoch)),
        None => (model, None),
    };
    Ok(TrainOutcome { model, history, best_epoch })
}

// ----------------------------------------------------------------------
// Lifelong system
// ----------------------------------------------------------------------

/// State carried across sequentially arriving tasks.
#[derive(Clone, Debug)]
pub struct LifelongSystemState {
    pub scenario: Scenario,
    /// Model shape template; vocabulary sizes and seed are overridden per
    /// system.
    pub base_config: ModelConfig,
    pub forward: Option<SystemModel>,
    /// Reverse one-to-many model, maintained by the reverse-teacher method.
    pub reverse: Option<SystemModel>,
    pub learned: Vec<TaskSpec>,
    /// Frequency-sorted vocabulary persisted per learned source language,
    /// keyed by language id (rank mappings need them after the raw data is
    /// gone).
    pub lang_vocabs: BTreeMap<String, Vocabulary>,
    /// Accumulated Fisher store (EWC only), anchored at the latest
    /// consolidation.
    pub fisher: Option<FisherDiag<f32>>,
    /// Tag many-to-one sources with indicators (off by default; the
    /// indicator convention is only required on the one-to-many side).
    pub many2one_source_indicators: bool,
}

impl LifelongSystemState {
    pub fn new(scenario: Scenario, base_config: ModelConfig) -> Self {
        LifelongSystemState {
            scenario,
            base_config,
            forward: None,
            reverse: None,
            learned: Vec::new(),
            lang_vocabs: BTreeMap::new(),
            fisher: None,
            many2one_source_indicators: false,
        }
    }

    pub fn learned_langs(&self) -> Vec<Lang> {
        match self.scenario {
            Scenario::OneToMany => self.learned.iter().map(|t| t.tgt_lang.clone()).collect(),
            Scenario::ManyToOne => self.learned.iter().map(|t| t.src_lang.clone()).collect(),
        }
    }

    fn uses_indicators(&self) -> bool {
        match self.scenario {
            Scenario::OneToMany => true,
            Scenario::ManyToOne => self.many2one_source_indicators,
        }
    }

    /// Tags a corpus's sources for this scenario's input convention.
    pub fn tag_corpus(&self, corpus: &ParallelCorpus) -> Result<ParallelCorpus> {
        if !self.uses_indicators() {
            return Ok(corpus.clone());
        }
        let mut tagged = ParallelCorpus::new(corpus.src_lang.clone(), corpus.tgt_lang.clone());
        tagged.weight = corpus.weight;
        for (s, t) in &corpus.pairs {
            tagged.pairs.push((
                s.without_indicator().with_indicator(&corpus.src_lang, &corpus.tgt_lang)?,
                t.clone(),
            ));
        }
        Ok(tagged)
    }

    /// Dev sets for every learned task plus (optionally) the incoming one.
    pub fn dev_sets(&self, extra: Option<&TaskSpec>) -> Result<Vec<DevSet>> {
        let mut out = Vec::new();
        for task in self.learned.iter().chain(extra) {
            let corpus = self.tag_corpus(&task.load_split("dev")?)?;
            out.push(DevSet { task_id: task.task_id.clone(), corpus });
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct LearnOutcome {
    pub state: LifelongSystemState,
    pub history: Vec<EpochDev>,
    pub distilled_pairs: usize,
}

fn model_seed(hyper: &TrainHyper, tag: &str) -> u64 {
    derive_seed(hyper.seed, &["model", tag])
}

fn init_model_for(
    base: &ModelConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    seed: u64,
) -> Result<ModelState<f32>> {
    let mut config = base.clone();
    config.src_vocab_size = src_vocab.len();
    config.tgt_vocab_size = tgt_vocab.len();
    config.seed = seed;
    ModelState::init(config)
}

fn sorted_vocab_of(corpus: &ParallelCorpus, lang: &Lang, max_vocab: usize) -> Vocabulary {
    Vocabulary::build(lang.clone(), corpus.sources().map(|s| s as _), max_vocab)
}

/// Trains a fresh single-task model (the per-task baseline).
pub fn train_single(
    scenario: Scenario,
    base_config: &ModelConfig,
    task: &TaskSpec,
    hyper: &TrainHyper,
) -> Result<(SystemModel, Vec<EpochDev>)> {
    let mut probe = LifelongSystemState::new(scenario, base_config.clone());
    probe.learned.push(task.clone());
    let raw = task.load_split("train")?;
    let tagged = probe.tag_corpus(&raw)?;
    let src_vocab = Vocabulary::build(
        task.src_lang.clone(),
        tagged.pairs.iter().map(|(s, _)| s),
        hyper.max_vocab,
    );
    let tgt_vocab = Vocabulary::build(
        task.tgt_lang.clone(),
        tagged.pairs.iter().map(|(_, t)| t),
        hyper.max_vocab,
    );
    let model = init_model_for(
        base_config,
        &src_vocab,
        &tgt_vocab,
        model_seed(hyper, &format!("single-{}", task.task_id)),
    )?;
    let dev = probe.dev_sets(None)?;
    let outcome = train_mixture(
        model,
        std::slice::from_ref(&tagged),
        (&src_vocab, &tgt_vocab),
        hyper,
        &dev,
        None,
    )?;
    Ok((SystemModel { model: outcome.model, src_vocab, tgt_vocab }, outcome.history))
}

/// Learns one more task with the chosen method, updating vocabularies,
/// model(s), persisted per-language vocabs and the Fisher store.
pub fn learn_task(
    mut state: LifelongSystemState,
    task: &TaskSpec,
    method: Method,
    hyper: &TrainHyper,
) -> Result<LearnOutcome> {
    if !method.compatible_with(state.scenario) {
        return Err(Error::ScenarioMismatch {
            method: method.name().into(),
            scenario: match state.scenario {
                Scenario::OneToMany => "one-to-many".into(),
                Scenario::ManyToOne => "many-to-one".into(),
            },
        });
    }
    let raw = task.load_split("train")?;
    let tagged_new = state.tag_corpus(&raw)?;
    // frequency-sorted vocabulary of the task's source language,
    // persisted for later rank mappings
    let task_lang_vocab = sorted_vocab_of(&raw, &task.src_lang, hyper.max_vocab);

    let task_src_vocab = Vocabulary::build(
        task.src_lang.clone(),
        tagged_new.pairs.iter().map(|(s, _)| s),
        hyper.max_vocab,
    );
    let task_tgt_vocab = Vocabulary::build(
        task.tgt_lang.clone(),
        tagged_new.pairs.iter().map(|(_, t)| t),
        hyper.max_vocab,
    );

    let dev = state.dev_sets(Some(task))?;
    let mut distilled_pairs = 0usize;

    let history = match state.forward.take() {
        // first task: every method reduces to plain training
        None => {
            let model = init_model_for(
                &state.base_config,
                &task_src_vocab,
                &task_tgt_vocab,
                model_seed(hyper, &format!("{}-stage1", method.name())),
            )?;
            let out = train_mixture(
                model,
                std::slice::from_ref(&tagged_new),
                (&task_src_vocab, &task_tgt_vocab),
                hyper,
                &dev,
                None,
            )?;
            state.forward = Some(SystemModel {
                model: out.model,
                src_vocab: task_src_vocab,
                tgt_vocab: task_tgt_vocab,
            });
            out.history
        }
        Some(old) => {
            let new_src_vocab = old.src_vocab.union(&task_src_vocab);
            let new_tgt_vocab = old.tgt_vocab.union(&task_tgt_vocab);
            let teacher = Teacher {
                model: &old.model,
                src_vocab: &old.src_vocab,
                tgt_vocab: &old.tgt_vocab,
            };
            let learned_langs = state.learned_langs();

            // the distillation set is built once, from the frozen teacher
            let distilled: Option<DistilledSet> = match method {
                Method::Finetune | Method::Joint | Method::Ewc => None,
                Method::MultiDistill => Some(build_one2many_distill_set(
                    teacher,
                    &raw.pairs.iter().map(|(s, _)| s.without_indicator()).collect::<Vec<_>>(),
                    &task.src_lang,
                    &learned_langs,
                    &hyper.distill_decode,
                )?),
                Method::DirectDistill => Some(build_many2one_distill_set(
                    teacher,
                    &raw.pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
                    &learned_langs,
                    &task.tgt_lang,
                    DistillKind::Direct,
                    &[],
                    &hyper.distill_decode,
                )?),
                Method::PseudoDistill => {
                    let mappings: Vec<crate::vocab::RankMapping> = learned_langs
                        .iter()
                        .map(|lang| {
                            let old_vocab = state
                                .lang_vocabs
                                .get(lang.as_str())
                                .ok_or_else(|| Error::MissingMapping(lang.to_string()))?;
                            Ok(crate::vocab::RankMapping::build(&task_lang_vocab, old_vocab))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(build_many2one_distill_set(
                        teacher,
                        &raw.pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
                        &learned_langs,
                        &task.tgt_lang,
                        DistillKind::Pseudo,
                        &mappings,
                        &hyper.distill_decode,
                    )?)
                }
                Method::ReverseDistill => None, // handled below with the reverse teacher
            };

            // reverse-teacher distillation needs the reverse model's output
            let reverse_built = if method == Method::ReverseDistill {
                let rev = state
                    .reverse
                    .as_ref()
                    .ok_or_else(|| Error::Corpus("reverse model missing".into()))?;
                let rev_teacher = Teacher {
                    model: &rev.model,
                    src_vocab: &rev.src_vocab,
                    tgt_vocab: &rev.tgt_vocab,
                };
                let targets: Vec<Sentence> =
                    raw.pairs.iter().map(|(_, t)| t.without_indicator()).collect();
                Some(build_reverse_distill_set(
                    rev_teacher,
                    &targets,
                    &task.tgt_lang,
                    &learned_langs,
                    &hyper.distill_decode,
                )?)
            } else {
                None
            };

            // grow the student over the unioned vocabularies
            let student = match method {
                Method::Joint => init_model_for(
                    &state.base_config,
                    &new_src_vocab,
                    &new_tgt_vocab,
                    model_seed(hyper, &format!("joint-stage{}", state.learned.len() + 1)),
                )?,
                _ => old.model.expand_vocab(
                    (&old.src_vocab, &old.tgt_vocab),
                    (&new_src_vocab, &new_tgt_vocab),
                )?,
            };

            let mut corpora: Vec<ParallelCorpus> = Vec::new();
            match method {
                Method::Joint => {
                    for learned in &state.learned {
                        corpora.push(state.tag_corpus(&learned.load_split("train")?)?);
                    }
                }
                _ => {
                    if let Some(set) = &distilled {
                        distilled_pairs += set.total_pairs();
                        corpora.extend(set.corpora.iter().map(|c| c.corpus.clone()));
                        if let Some(dir) = &hyper.distill_save_dir {
                            set.save(dir)?;
                        }
                    }
                    if let Some(rd) = &reverse_built {
                        distilled_pairs += rd.forward.total_pairs();
                        corpora.extend(rd.forward.corpora.iter().map(|c| c.corpus.clone()));
                        if let Some(dir) = &hyper.distill_save_dir {
                            rd.forward.save(&dir.join("forward"))?;
                            rd.reverse.save(&dir.join("reverse"))?;
                        }
                    }
                }
            }
            corpora.push(tagged_new.clone());

            let ewc_ctx = if method == Method::Ewc {
                if let Some(fisher) = state.fisher.as_mut() {
                    fisher.expand_to(&student)?;
                }
                state
                    .fisher
                    .as_ref()
                    .map(|fisher| EwcPenalty { fisher, lambda: hyper.ewc_lambda })
            } else {
                None
            };

            let out = train_mixture(
                student,
                &corpora,
                (&new_src_vocab, &new_tgt_vocab),
                hyper,
                &dev,
                ewc_ctx,
            )?;

            // retrain the reverse student so it can teach the next task
            if let Some(rd) = reverse_built {
                let rev = state.reverse.take().expect("checked above");
                let mut rev_corpus_new =
                    ParallelCorpus::new(task.tgt_lang.clone(), task.src_lang.clone());
                for (x, y) in &raw.pairs {
                    rev_corpus_new.pairs.push((
                        y.without_indicator().with_indicator(&task.tgt_lang, &task.src_lang)?,
                        x.without_indicator(),
                    ));
                }
                let rev_task_src = Vocabulary::build(
                    task.tgt_lang.clone(),
                    rev_corpus_new.pairs.iter().map(|(s, _)| s),
                    hyper.max_vocab,
                );
                let rev_task_tgt = Vocabulary::build(
                    task.src_lang.clone(),
                    rev_corpus_new.pairs.iter().map(|(_, t)| t),
                    hyper.max_vocab,
                );
                let rev_src_vocab = rev.src_vocab.union(&rev_task_src);
                let rev_tgt_vocab = rev.tgt_vocab.union(&rev_task_tgt);
                let rev_student = rev
                    .model
                    .expand_vocab((&rev.src_vocab, &rev.tgt_vocab), (&rev_src_vocab, &rev_tgt_vocab))?;
                let mut rev_corpora: Vec<ParallelCorpus> =
                    rd.reverse.corpora.iter().map(|c| c.corpus.clone()).collect();
                rev_corpora.push(rev_corpus_new);
                let rev_hyper = TrainHyper {
                    seed: derive_seed(hyper.seed, &["reverse"]),
                    select_best_by_dev: false,
                    ..hyper.clone()
                };
                let rev_out = train_mixture(
                    rev_student,
                    &rev_corpora,
                    (&rev_src_vocab, &rev_tgt_vocab),
                    &rev_hyper,
                    &[],
                    None,
                )?;
                state.reverse = Some(SystemModel {
                    model: rev_out.model,
                    src_vocab: rev_src_vocab,
                    tgt_vocab: rev_tgt_vocab,
                });
            }

            state.forward = Some(SystemModel {
                model: out.model,
                src_vocab: new_src_vocab,
                tgt_vocab: new_tgt_vocab,
            });
            out.history
        }
    };

    // bootstrap or sanity-keep the reverse model on the first task
    if method == Method::ReverseDistill && state.reverse.is_none() {
        let mut rev_corpus = ParallelCorpus::new(task.tgt_lang.clone(), task.src_lang.clone());
        for (x, y) in &raw.pairs {
            rev_corpus.pairs.push((
                y.without_indicator().with_indicator(&task.tgt_lang, &task.src_lang)?,
                x.without_indicator(),
            ));
        }
        let rev_src_vocab = Vocabulary::build(
            task.tgt_lang.clone(),
            rev_corpus.pairs.iter().map(|(s, _)| s),
            hyper.max_vocab,
        );
        let rev_tgt_vocab = Vocabulary::build(
            task.src_lang.clone(),
            rev_corpus.pairs.iter().map(|(_, t)| t),
            hyper.max_vocab,
        );
        let rev_model = init_model_for(
            &state.base_config,
            &rev_src_vocab,
            &rev_tgt_vocab,
            model_seed(hyper, "reverse-stage1"),
        )?;
        let rev_hyper = TrainHyper {
            seed: derive_seed(hyper.seed, &["reverse"]),
            select_best_by_dev: false,
            ..hyper.clone()
        };
        let rev_out = train_mixture(
            rev_model,
            std::slice::from_ref(&rev_corpus),
            (&rev_src_vocab, &rev_tgt_vocab),
            &rev_hyper,
            &[],
            None,
        )?;
        state.reverse = Some(SystemModel {
            model: rev_out.model,
            src_vocab: rev_src_vocab,
            tgt_vocab: rev_tgt_vocab,
        });
    }

    // EWC consolidates on the task's own data while it is still available
    if method == Method::Ewc {
        let fwd = state.forward.as_ref().expect("model trained above");
        let task_fisher = compute_fisher(
            &fwd.model,
            &tagged_new,
            (&fwd.src_vocab, &fwd.tgt_vocab),
            hyper.fisher_sample_cap,
        )?;
        state.fisher = Some(match state.fisher.take() {
            None => task_fisher,
            Some(mut acc) => {
                acc.expand_to(&fwd.model)?;
                for (a, t) in acc.diag.iter_mut().zip(&task_fisher.diag) {
                    for (ai, &ti) in a.as_mut_slice().iter_mut().zip(t.as_slice()) {
                        *ai += ti;
                    }
                }
                acc.anchor = fwd.model.params().to_vec();
                acc.sample_count += task_fisher.sample_count;
                acc
            }
        });
    }

    state.lang_vocabs.insert(task.src_lang.to_string(), task_lang_vocab);
    state.learned.push(task.clone());
    Ok(LearnOutcome { state, history, distilled_pairs })
}

// ----------------------------------------------------------------------
// System persistence (resume support)
// ----------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SystemMeta {
    scenario: Scenario,
    base_config: ModelConfig,
    learned: Vec<TaskSpec>,
    lang_vocab_langs: Vec<String>,
    has_reverse: bool,
    many2one_source_indicators: bool,
}

/// Writes the whole system state under `dir` (forward/reverse checkpoints,
/// persisted language vocabularies, task list).
pub fn save_system(state: &LifelongSystemState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fwd = state
        .forward
        .as_ref()
        .ok_or_else(|| Error::Corpus("cannot save an empty system".into()))?;
    save_checkpoint(
        &dir.join("forward"),
        &fwd.model,
        None,
        (&fwd.src_vocab, &fwd.tgt_vocab),
        state.fisher.as_ref(),
    )?;
    if let Some(rev) = &state.reverse {
        save_checkpoint(
            &dir.join("reverse"),
            &rev.model,
            None,
            (&rev.src_vocab, &rev.tgt_vocab),
            None,
        )?;
    }
    let langs_dir = dir.join("langs");
    fs::create_dir_all(&langs_dir)?;
    for (lang, vocab) in &state.lang_vocabs {
        vocab.save(&langs_dir.join(format!("{lang}.vocab")))?;
    }
    let meta = SystemMeta {
        scenario: state.scenario,
        base_config: state.base_config.clone(),
        learned: state.learned.clone(),
        lang_vocab_langs: state.lang_vocabs.keys().cloned().collect(),
        has_reverse: state.reverse.is_some(),
        many2one_source_indicators: state.many2one_source_indicators,
    };
    fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_system(dir: &Path) -> Result<LifelongSystemState> {
    let meta: SystemMeta = serde_json::from_slice(&fs::read(dir.join("state.json"))?)?;
    let fwd = load_checkpoint(&dir.join("forward"))?;
    let reverse = if meta.has_reverse {
        let rev = load_checkpoint(&dir.join("reverse"))?;
        Some(SystemModel { model: rev.model, src_vocab: rev.src_vocab, tgt_vocab: rev.tgt_vocab })
    } else {
        None
    };
    let mut lang_vocabs = BTreeMap::new();
    for lang in &meta.lang_vocab_langs {
        let vocab =
            Vocabulary::load(&dir.join("langs").join(format!("{lang}.vocab")), Lang::new(lang.clone())?)?;
        lang_vocabs.insert(lang.clone(), vocab);
    }
    Ok(LifelongSystemState {
        scenario: meta.scenario,
        base_config: meta.base_config,
        forward: Some(SystemModel {
            model: fwd.model,
            src_vocab: fwd.src_vocab,
            tgt_vocab: fwd.tgt_vocab,
        }),
        reverse,
        learned: meta.learned,
        lang_vocabs,
        fisher: fwd.fisher,
        many2one_source_indicators: meta.many2one_source_indicators,
    })
}

/// The checksum invariant: distillation-set construction reads the teacher
/// without touching it, so callers can verify frozen-teacher builds.
pub fn teacher_checksum(state: &LifelongSystemState) -> Option<String> {
    state.forward.as_ref().map(|f| param_checksum(&f.model))
}
