//! Calibration gate: the default desk-scale model must master one
//! synthetic task quickly, otherwise no downstream comparison between
//! continual-learning methods means anything.

use lilt_core::corpus::Lang;
use lilt_core::decoding::{DecodeConfig, DecodeMode};
use lilt_core::model::ModelConfig;
use lilt_core::optim::Schedule;
use lilt_core::synth::{gen_task, SyntheticLanguage, SyntheticTask};
use lilt_core::trainer::{train_single, Scenario, TaskSpec, TrainHyper};

#[test]
fn default_model_reaches_95_dev_bleu_in_15_epochs() {
    let lang = |s: &str| Lang::new(s).unwrap();
    let vocab = 200usize;
    let spec = SyntheticTask {
        name: "gate".into(),
        src: SyntheticLanguage::rank_preserving(lang("aa"), vocab),
        tgt: SyntheticLanguage::shuffled(lang("bb"), vocab, 5).with_reorder(2),
        train_size: 8_000,
        dev_size: 200,
        test_size: 200,
        seed: 404,
        zipf_s: 1.1,
        len_range: (4, 12),
    };
    let tmp = tempfile::tempdir().unwrap();
    gen_task(&spec, tmp.path()).unwrap();
    let task = TaskSpec {
        task_id: "gate".into(),
        src_lang: lang("aa"),
        tgt_lang: lang("bb"),
        dir: tmp.path().to_path_buf(),
    };

    // model-core defaults: d64, 4 heads, 2+2 layers, ff 128, dropout 0.1
    let base = ModelConfig { seed: 0, ..Default::default() };
    let hyper = TrainHyper {
        epochs: 15,
        batch_tokens: 2500,
        schedule: Schedule { warmup_steps: 150, peak_lr: 3e-3 },
        seed: 2,
        max_vocab: 2000,
        dev_decode: DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            k_best: 1,
            length_penalty: 0.0,
            max_len: 32,
        },
        select_best_by_dev: true,
        ..Default::default()
    };
    let (_, history) = train_single(Scenario::OneToMany, &base, &task, &hyper).unwrap();
    let best = history
        .iter()
        .map(|h| h.per_task[0].1)
        .fold(0.0f64, f64::max);
    assert!(best >= 95.0, "calibration gate: best dev BLEU {best:.2} below 95");
    println!("calibration gate pass: best dev BLEU {best:.2} within 15 epochs");
}
