//! End-to-end mechanics of sequential task learning: distilled-set
//! shapes, frozen teachers, vocabulary growth, the reverse-model mirror
//! and stage evaluation. Quality directions live in the acceptance suite;
//! these runs are sized for speed.

use std::path::Path;

use lilt_core::checkpoint::param_checksum;
use lilt_core::corpus::Lang;
use lilt_core::decoding::{DecodeConfig, DecodeMode};
use lilt_core::distill::Provenance;
use lilt_core::model::ModelConfig;
use lilt_core::optim::Schedule;
use lilt_core::report::evaluate_stage;
use lilt_core::synth::{gen_task, SyntheticLanguage, SyntheticTask};
use lilt_core::trainer::{
    learn_task, LifelongSystemState, Method, Scenario, TaskSpec, TrainHyper,
};

fn lang(s: &str) -> Lang {
    Lang::new(s).unwrap()
}

const VOCAB: usize = 30;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        dropout: 0.0,
        max_len: 12,
        seed: 0,
        ..Default::default()
    }
}

fn small_hyper(seed: u64) -> TrainHyper {
    TrainHyper {
        epochs: 3,
        batch_tokens: 400,
        schedule: Schedule { warmup_steps: 20, peak_lr: 5e-3 },
        seed,
        max_vocab: 500,
        distill_decode: DecodeConfig { beam_size: 2, max_len: 10, ..Default::default() },
        dev_decode: DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            k_best: 1,
            length_penalty: 0.0,
            max_len: 10,
        },
        ..Default::default()
    }
}

fn one2many_task(dir: &Path, name: &str, tgt: &str, seed: u64) -> TaskSpec {
    let task = SyntheticTask {
        name: name.into(),
        src: SyntheticLanguage::rank_preserving(lang("aa"), VOCAB),
        tgt: SyntheticLanguage::shuffled(lang(tgt), VOCAB, seed),
        train_size: 120,
        dev_size: 20,
        test_size: 20,
        seed,
        zipf_s: 1.2,
        len_range: (2, 7),
    };
    let task_dir = dir.join(name);
    gen_task(&task, &task_dir).unwrap();
    TaskSpec { task_id: name.into(), src_lang: lang("aa"), tgt_lang: lang(tgt), dir: task_dir }
}

fn many2one_task(dir: &Path, name: &str, src: &str, seed: u64) -> TaskSpec {
    let task = SyntheticTask {
        name: name.into(),
        src: SyntheticLanguage::rank_preserving(lang(src), VOCAB),
        tgt: SyntheticLanguage::rank_preserving(lang("ee"), VOCAB),
        train_size: 120,
        dev_size: 20,
        test_size: 20,
        seed,
        zipf_s: 1.2,
        len_range: (2, 7),
    };
    let task_dir = dir.join(name);
    gen_task(&task, &task_dir).unwrap();
    TaskSpec { task_id: name.into(), src_lang: lang(src), tgt_lang: lang("ee"), dir: task_dir }
}

#[test]
fn multilingual_distillation_counts_and_frozen_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = one2many_task(tmp.path(), "t1", "bb", 1);
    let t2 = one2many_task(tmp.path(), "t2", "cc", 2);
    let t3 = one2many_task(tmp.path(), "t3", "dd", 3);

    let mut state = LifelongSystemState::new(Scenario::OneToMany, small_model());
    let out = learn_task(state, &t1, Method::MultiDistill, &small_hyper(1)).unwrap();
    state = out.state;
    assert_eq!(out.distilled_pairs, 0);
    let stage1_checksum = param_checksum(&state.forward.as_ref().unwrap().model);
    let old_src_vocab = state.forward.as_ref().unwrap().src_vocab.clone();

    let mut hyper2 = small_hyper(2);
    let distill_dir = tmp.path().join("distilled-stage2");
    hyper2.distill_save_dir = Some(distill_dir.clone());
    let out = learn_task(state, &t2, Method::MultiDistill, &hyper2).unwrap();
    state = out.state;
    // one learned language x 120 new sources
    assert_eq!(out.distilled_pairs, 120);
    // provenance pins the teacher that generated the set
    let prov: Provenance = serde_json::from_slice(
        &std::fs::read(distill_dir.join("provenance.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(prov.teacher_checksum, stage1_checksum, "teacher must stay frozen");
    assert!(distill_dir.join("distill-bb.aa").exists());
    assert!(distill_dir.join("distill-bb.bb").exists());
    // vocabulary growth is append-only over the old model's vocab
    let fwd = state.forward.as_ref().unwrap();
    assert!(fwd.src_vocab.extends(&old_src_vocab));
    assert!(fwd.src_vocab.contains("<aa2bb>") && fwd.src_vocab.contains("<aa2cc>"));

    let out = learn_task(state, &t3, Method::MultiDistill, &small_hyper(3)).unwrap();
    state = out.state;
    // two learned languages x 120 sources
    assert_eq!(out.distilled_pairs, 240);
    assert_eq!(state.learned.len(), 3);

    let report = evaluate_stage(&state, &DecodeConfig { max_len: 10, ..Default::default() }).unwrap();
    assert_eq!(report.stage, 3);
    assert_eq!(report.per_task.len(), 3);
    assert_eq!(report.per_task[0].task_id, "t1");
    let mean = report.per_task.iter().map(|t| t.bleu).sum::<f64>() / 3.0;
    assert!((report.bleu_avg - mean).abs() < 1e-9);
}

#[test]
fn kbest_distillation_multiplies_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = one2many_task(tmp.path(), "k1", "bb", 5);
    let t2 = one2many_task(tmp.path(), "k2", "cc", 6);

    let state = LifelongSystemState::new(Scenario::OneToMany, small_model());
    let out = learn_task(state, &t1, Method::MultiDistill, &small_hyper(5)).unwrap();

    let mut hyper = small_hyper(6);
    hyper.distill_decode = DecodeConfig {
        mode: DecodeMode::KBest,
        beam_size: 4,
        k_best: 4,
        length_penalty: 0.6,
        max_len: 10,
    };
    let out = learn_task(out.state, &t2, Method::MultiDistill, &hyper).unwrap();
    // 1 learned language x 120 sources x k=4
    assert_eq!(out.distilled_pairs, 480);
}

#[test]
fn finetune_is_learn_task_with_empty_distill_set() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = one2many_task(tmp.path(), "f1", "bb", 7);
    let t2 = one2many_task(tmp.path(), "f2", "cc", 8);
    let state = LifelongSystemState::new(Scenario::OneToMany, small_model());
    let out = learn_task(state, &t1, Method::Finetune, &small_hyper(7)).unwrap();
    let out = learn_task(out.state, &t2, Method::Finetune, &small_hyper(8)).unwrap();
    assert_eq!(out.distilled_pairs, 0);
    assert_eq!(out.state.learned.len(), 2);
}

#[test]
fn reverse_distill_maintains_the_mirror() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = many2one_task(tmp.path(), "r1", "aa", 11);
    let t2 = many2one_task(tmp.path(), "r2", "bb", 12);
    let t3 = many2one_task(tmp.path(), "r3", "cc", 13);

    let state = LifelongSystemState::new(Scenario::ManyToOne, small_model());
    let out = learn_task(state, &t1, Method::ReverseDistill, &small_hyper(11)).unwrap();
    let state = out.state;
    let rev = state.reverse.as_ref().expect("reverse model bootstrapped at stage 1");
    assert!(rev.src_vocab.contains("<ee2aa>"));

    let out = learn_task(state, &t2, Method::ReverseDistill, &small_hyper(12)).unwrap();
    let state = out.state;
    // stage 2: one learned language x 120 targets of forward pairs
    assert_eq!(out.distilled_pairs, 120);
    let rev = state.reverse.as_ref().unwrap();
    assert!(rev.src_vocab.contains("<ee2aa>") && rev.src_vocab.contains("<ee2bb>"));

    let out = learn_task(state, &t3, Method::ReverseDistill, &small_hyper(13)).unwrap();
    let state = out.state;
    assert_eq!(out.distilled_pairs, 240);
    // mirror invariant: the reverse model's target languages cover every
    // learned source language
    let rev = state.reverse.as_ref().unwrap();
    for learned in &state.learned {
        let probe = format!("{}0", learned.src_lang);
        assert!(
            rev.tgt_vocab.contains(&probe),
            "reverse target vocab misses {probe}"
        );
        let ind = format!("<ee2{}>", learned.src_lang);
        assert!(rev.src_vocab.contains(&ind), "reverse source vocab misses {ind}");
    }
    // forward model serves all learned source languages
    let fwd = state.forward.as_ref().unwrap();
    for learned in &state.learned {
        assert!(fwd.src_vocab.contains(&format!("{}0", learned.src_lang)));
    }
}

#[test]
fn pseudo_distill_uses_persisted_vocabularies() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = many2one_task(tmp.path(), "p1", "aa", 21);
    let t2 = many2one_task(tmp.path(), "p2", "bb", 22);

    let state = LifelongSystemState::new(Scenario::ManyToOne, small_model());
    let out = learn_task(state, &t1, Method::PseudoDistill, &small_hyper(21)).unwrap();
    assert!(out.state.lang_vocabs.contains_key("aa"));

    let mut hyper = small_hyper(22);
    let dist_dir = tmp.path().join("pseudo-sets");
    hyper.distill_save_dir = Some(dist_dir.clone());
    let out = learn_task(out.state, &t2, Method::PseudoDistill, &hyper).unwrap();
    assert_eq!(out.distilled_pairs, 120);
    let prov: Provenance = serde_json::from_slice(
        &std::fs::read(dist_dir.join("provenance.json")).unwrap(),
    )
    .unwrap();
    assert!(prov.mapping_checksums.contains_key("aa"));
    // pseudo sources live in the old language
    let text = std::fs::read_to_string(dist_dir.join("distill-aa.aa")).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.split_whitespace().all(|t| t.starts_with("aa") || t == "UNK"));
}

#[test]
fn direct_distill_runs_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = many2one_task(tmp.path(), "d1", "aa", 31);
    let t2 = many2one_task(tmp.path(), "d2", "bb", 32);
    let state = LifelongSystemState::new(Scenario::ManyToOne, small_model());
    let out = learn_task(state, &t1, Method::DirectDistill, &small_hyper(31)).unwrap();
    let out = learn_task(out.state, &t2, Method::DirectDistill, &small_hyper(32)).unwrap();
    assert_eq!(out.distilled_pairs, 120);
}

#[test]
fn joint_requires_raw_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = one2many_task(tmp.path(), "j1", "bb", 41);
    let t2 = one2many_task(tmp.path(), "j2", "cc", 42);
    let state = LifelongSystemState::new(Scenario::OneToMany, small_model());
    let out = learn_task(state, &t1, Method::Joint, &small_hyper(41)).unwrap();
    // drop task 1's raw training data: joint training must now fail
    std::fs::remove_file(t1.dir.join("train.aa")).unwrap();
    let err = learn_task(out.state, &t2, Method::Joint, &small_hyper(42)).unwrap_err();
    assert!(matches!(err, lilt_core::Error::MissingSplit { .. }));
}

#[test]
fn identical_seeds_reproduce_learned_models_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let t1 = one2many_task(tmp.path(), "s1", "bb", 51);
    let t2 = one2many_task(tmp.path(), "s2", "cc", 52);
    let mut checksums = Vec::new();
    for _ in 0..2 {
        let state = LifelongSystemState::new(Scenario::OneToMany, small_model());
        let out = learn_task(state, &t1, Method::MultiDistill, &small_hyper(9)).unwrap();
        let out = learn_task(out.state, &t2, Method::MultiDistill, &small_hyper(10)).unwrap();
        checksums.push(param_checksum(&out.state.forward.as_ref().unwrap().model));
    }
    assert_eq!(checksums[0], checksums[1]);
}
