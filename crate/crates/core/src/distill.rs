//! Distillation-set construction.
//!
//! All three continual-learning distillation methods, plus the direct
//! baseline, reduce to: feed something into a frozen teacher, decode, and
//! pair the result into a synthetic corpus per previously learned
//! language.
//!
//! - multilingual (one-to-many): tag each new-task source with a learned
//!   language's indicator and decode the teacher's translation;
//! - direct (many-to-one baseline): feed the raw new-language source,
//!   which encodes to mostly `UNK` against the teacher's vocabulary;
//! - pseudo-input (many-to-one): rewrite the new source token-by-token
//!   into each learned language via frequency-rank mapping, then decode;
//! - reverse-teacher (many-to-one): feed the authentic target into a
//!   reverse one-to-many teacher to synthesize old-language sources,
//!   pairing them with the authentic target.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::param_checksum;
use crate::corpus::{Lang, ParallelCorpus, Sentence};
use crate::decoding::{decode_corpus, kbest_decode, strip_eos, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::vocab::{RankMapping, Vocabulary};

use rayon::prelude::*;

/// A frozen model with the vocabularies it was trained against.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a ModelState<f32>,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
}

impl<'a> Teacher<'a> {
    fn decode_sentences(&self, inputs: &[Sentence], config: &DecodeConfig) -> Result<Vec<Sentence>> {
        let sources: Vec<Vec<usize>> = inputs.iter().map(|s| self.src_vocab.encode(s)).collect();
        let decoded = decode_corpus(self.model, &sources, config)?;
        decoded
            .iter()
            .map(|d| self.tgt_vocab.decode(strip_eos(&d.tokens)))
            .collect()
    }

    fn decode_kbest(&self, inputs: &[Sentence], config: &DecodeConfig) -> Result<Vec<Vec<Sentence>>> {
        let sources: Vec<Vec<usize>> = inputs.iter().map(|s| self.src_vocab.encode(s)).collect();
        sources
            .par_iter()
            .map(|src| {
                let kb = kbest_decode(self.model, src, config)?;
                kb.hyps
                    .iter()
                    .map(|h| self.tgt_vocab.decode(strip_eos(&h.tokens)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    Multilingual,
    Direct,
    Pseudo,
    Reverse,
}

/// One synthetic corpus covering one previously learned language.
#[derive(Clone, Debug)]
pub struct DistilledCorpus {
    pub for_lang: Lang,
    pub kind: DistillKind,
    pub mode: DecodeMode,
    pub corpus: ParallelCorpus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: DistillKind,
    pub mode: DecodeMode,
    pub teacher_checksum: String,
    pub mapping_checksums: BTreeMap<String, String>,
}

/// One corpus per previously learned language, built once from a frozen
/// teacher.
#[derive(Clone, Debug)]
pub struct DistilledSet {
    pub corpora: Vec<DistilledCorpus>,
    pub provenance: Provenance,
}

impl DistilledSet {
    pub fn empty(kind: DistillKind, mode: DecodeMode, teacher_checksum: String) -> Self {
        DistilledSet {
            corpora: Vec::new(),
            provenance: Provenance {
                kind,
                mode,
                teacher_checksum,
                mapping_checksums: BTreeMap::new(),
            },
        }
    }

    pub fn total_pairs(&self) -> usize {
        self.corpora.iter().map(|c| c.corpus.len()).sum()
    }

    /// Persists as ordinary corpus file pairs plus a provenance manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for c in &self.corpora {
            c.corpus.save(&dir.join(format!("distill-{}", c.for_lang)))?;
        }
        fs::write(dir.join("provenance.json"), serde_json::to_vec_pretty(&self.provenance)?)?;
        Ok(())
    }
}

fn require_indicator(vocab: &Vocabulary, src: &Lang, tgt: &Lang) -> Result<()> {
    let ind = Lang::indicator(src, tgt);
    if !vocab.contains(ind.as_str()) {
        return Err(Error::UnknownIndicator(ind.as_str().to_string()));
    }
    Ok(())
}

/// Multilingual distillation for the one-to-many scenario: for each
/// learned target language, tag every new-task source with that language's
/// indicator, decode the teacher, and pair tagged source with the decode.
/// K-best mode emits k pairs per source, each at corpus weight 1/k.
pub fn build_one2many_distill_set(
    teacher: Teacher<'_>,
    new_sources: &[Sentence],
    src_lang: &Lang,
    learned_tgt_langs: &[Lang],
    config: &DecodeConfig,
) -> Result<DistilledSet> {
    let mut set = DistilledSet::empty(
        DistillKind::Multilingual,
        config.mode,
        param_checksum(teacher.model),
    );
    for tgt_lang in learned_tgt_langs {
        require_indicator(teacher.src_vocab, src_lang, tgt_lang)?;
        let tagged: Vec<Sentence> = new_sources
            .iter()
            .map(|s| s.without_indicator().with_indicator(src_lang, tgt_lang))
            .collect::<Result<Vec<_>>>()?;
        let mut corpus = ParallelCorpus::new(src_lang.clone(), tgt_lang.clone());
        if config.mode == DecodeMode::KBest {
            corpus.weight = 1.0 / config.k_best as f64;
            let all = teacher.decode_kbest(&tagged, config)?;
            for (src, hyps) in tagged.iter().zip(all) {
                // pad short k-best lists by repeating the best hypothesis
                // so per-task pair counts stay k * |new task|
                let best = hyps.first().cloned().unwrap_or_else(|| Sentence::new(vec![]));
                for k in 0..config.k_best {
                    let tgt = hyps.get(k).cloned().unwrap_or_else(|| best.clone());
                    corpus.pairs.push((src.clone(), tgt));
                }
            }
        } else {
            let decoded = teacher.decode_sentences(&tagged, config)?;
            for (src, tgt) in tagged.iter().zip(decoded) {
                corpus.pairs.push((src.clone(), tgt));
            }
        }
        set.corpora.push(DistilledCorpus {
            for_lang: tgt_lang.clone(),
            kind: DistillKind::Multilingual,
            mode: config.mode,
            corpus,
        });
    }
    Ok(set)
}

/// Direct distillation (the extreme-partial-distillation baseline) or
/// pseudo-input distillation for the many-to-one scenario.
///
/// Direct mode feeds the raw new-language sources into the teacher — they
/// encode almost entirely to `UNK` — decodes once, and replicates the
/// resulting corpus for every learned language so the objective keeps one
/// term per previous task. Pseudo mode requires a frequency-rank mapping
/// per learned language and decodes each pseudo input separately.
pub fn build_many2one_distill_set(
    teacher: Teacher<'_>,
    new_sources: &[Sentence],
    learned_src_langs: &[Lang],
    tgt_lang: &Lang,
    kind: DistillKind,
    mappings: &[RankMapping],
    config: &DecodeConfig,
) -> Result<DistilledSet> {
    let mut set = DistilledSet::empty(kind, config.mode, param_checksum(teacher.model));
    match kind {
        DistillKind::Direct => {
            let decoded = teacher.decode_sentences(new_sources, config)?;
            for lang in learned_src_langs {
                let mut corpus = ParallelCorpus::new(lang.clone(), tgt_lang.clone());
                for (src, tgt) in new_sources.iter().zip(decoded.iter()) {
                    corpus.pairs.push((src.clone(), tgt.clone()));
                }
                set.corpora.push(DistilledCorpus {
                    for_lang: lang.clone(),
                    kind,
                    mode: config.mode,
                    corpus,
                });
            }
        }
        DistillKind::Pseudo => {
            for lang in learned_src_langs {
                let mapping = mappings
                    .iter()
                    .find(|m| m.to_lang() == lang)
                    .ok_or_else(|| Error::MissingMapping(lang.to_string()))?;
                set.provenance
                    .mapping_checksums
                    .insert(lang.to_string(), mapping.checksum());
                let pseudo: Vec<Sentence> =
                    new_sources.iter().map(|s| mapping.apply(s)).collect();
                let decoded = teacher.decode_sentences(&pseudo, config)?;
                let mut corpus = ParallelCorpus::new(lang.clone(), tgt_lang.clone());
                for (src, tgt) in pseudo.into_iter().zip(decoded) {
                    corpus.pairs.push((src, tgt));
                }
                set.corpora.push(DistilledCorpus {
                    for_lang: lang.clone(),
                    kind,
                    mode: config.mode,
                    corpus,
                });
            }
        }
        other => {
            return Err(Error::Corpus(format!(
                "build_many2one_distill_set does not handle {other:?}"
            )))
        }
    }
    Ok(set)
}

/// Forward and reverse training corpora produced by the reverse teacher.
#[derive(Clone, Debug)]
pub struct ReverseDistilled {
    /// Per learned language: (synthesized source X̂_i, authentic target Y).
    pub forward: DistilledSet,
    /// Per learned language: (tagged authentic Y, synthesized X̂_i) for
    /// retraining the reverse student.
    pub reverse: DistilledSet,
}

/// Reverse-teacher distillation: tag each authentic new-task target with a
/// learned language's indicator, decode the reverse one-to-many teacher to
/// synthesize that language's source, and emit both the forward pair
/// (X̂_i, Y) and the reverse pair (Y tagged, X̂_i).
pub fn build_reverse_distill_set(
    reverse_teacher: Teacher<'_>,
    new_targets: &[Sentence],
    tgt_lang: &Lang,
    learned_src_langs: &[Lang],
    config: &DecodeConfig,
) -> Result<ReverseDistilled> {
    let checksum = param_checksum(reverse_teacher.model);
    let mut forward = DistilledSet::empty(DistillKind::Reverse, config.mode, checksum.clone());
    let mut reverse = DistilledSet::empty(DistillKind::Reverse, config.mode, checksum);
    for src_lang in learned_src_langs {
        require_indicator(reverse_teacher.src_vocab, tgt_lang, src_lang)?;
        let tagged: Vec<Sentence> = new_targets
            .iter()
            .map(|y| y.without_indicator().with_indicator(tgt_lang, src_lang))
            .collect::<Result<Vec<_>>>()?;
        let synthesized = reverse_teacher.decode_sentences(&tagged, config)?;

        let mut fwd = ParallelCorpus::new(src_lang.clone(), tgt_lang.clone());
        let mut rev = ParallelCorpus::new(tgt_lang.clone(), src_lang.clone());
        for ((y_tagged, y), x_hat) in tagged.iter().zip(new_targets).zip(synthesized) {
            fwd.pairs.push((x_hat.clone(), y.without_indicator()));
            rev.pairs.push((y_tagged.clone(), x_hat));
        }
        forward.corpora.push(DistilledCorpus {
            for_lang: src_lang.clone(),
            kind: DistillKind::Reverse,
            mode: config.mode,
            corpus: fwd,
        });
        reverse.corpora.push(DistilledCorpus {
            for_lang: src_lang.clone(),
            kind: DistillKind::Reverse,
            mode: config.mode,
            corpus: rev,
        });
    }
    Ok(ReverseDistilled { forward, reverse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::UNK;

    fn lang(s: &str) -> Lang {
        Lang::new(s).unwrap()
    }

    fn sentences(lines: &[&str]) -> Vec<Sentence> {
        lines.iter().map(|l| Sentence::parse(l).unwrap()).collect()
    }

    /// Tiny untrained teacher over fixed vocabularies.
    fn make_teacher(
        src_sents: &[Sentence],
        tgt_sents: &[Sentence],
        indicators: &[(&str, &str)],
        seed: u64,
    ) -> (ModelState<f32>, Vocabulary, Vocabulary) {
        let mut src_vocab = Vocabulary::build(lang("xx"), src_sents, 500);
        for (a, b) in indicators {
            src_vocab.register_indicator(&Lang::indicator(&lang(a), &lang(b))).unwrap();
        }
        let tgt_vocab = Vocabulary::build(lang("yy"), tgt_sents, 500);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_len: 16,
            src_vocab_size: src_vocab.len(),
            tgt_vocab_size: tgt_vocab.len(),
            seed,
            shared_src_tgt_embeddings: false,
            label_smoothing: 0.1,
        };
        (ModelState::init(cfg).unwrap(), src_vocab, tgt_vocab)
    }

    #[test]
    fn one2many_counts_and_tagging() {
        let src_sents = sentences(&["e one two", "e two three", "e three one"]);
        let tgt_sents = sentences(&["i uno due", "n een twee"]);
        let (model, sv, tv) =
            make_teacher(&src_sents, &tgt_sents, &[("en", "it"), ("en", "nl")], 3);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let cfg = DecodeConfig { max_len: 6, ..Default::default() };
        let set = build_one2many_distill_set(
            teacher,
            &src_sents,
            &lang("en"),
            &[lang("it"), lang("nl")],
            &cfg,
        )
        .unwrap();
        assert_eq!(set.corpora.len(), 2);
        for c in &set.corpora {
            assert_eq!(c.corpus.len(), 3);
            assert_eq!(c.corpus.weight, 1.0);
            for (s, _) in &c.corpus.pairs {
                let expected = format!("<en2{}>", c.for_lang);
                assert_eq!(s.indicator().unwrap().as_str(), expected);
            }
        }
        assert_eq!(set.provenance.teacher_checksum, param_checksum(&model));
    }

    #[test]
    fn one2many_unknown_indicator_rejected() {
        let src_sents = sentences(&["e one"]);
        let tgt_sents = sentences(&["i uno"]);
        let (model, sv, tv) = make_teacher(&src_sents, &tgt_sents, &[("en", "it")], 3);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let err = build_one2many_distill_set(
            teacher,
            &src_sents,
            &lang("en"),
            &[lang("ro")],
            &DecodeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownIndicator(_)));
    }

    #[test]
    fn one2many_kbest_counts_and_weight() {
        let src_sents = sentences(&["e one two", "e two three"]);
        let tgt_sents = sentences(&["i uno due tre quattro"]);
        let (model, sv, tv) = make_teacher(&src_sents, &tgt_sents, &[("en", "it")], 7);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let cfg = DecodeConfig {
            mode: DecodeMode::KBest,
            beam_size: 4,
            k_best: 4,
            length_penalty: 0.6,
            max_len: 6,
        };
        let set =
            build_one2many_distill_set(teacher, &src_sents, &lang("en"), &[lang("it")], &cfg)
                .unwrap();
        assert_eq!(set.corpora.len(), 1);
        assert_eq!(set.corpora[0].corpus.len(), 8); // 2 sources x k=4
        assert!((set.corpora[0].corpus.weight - 0.25).abs() < 1e-12);
    }

    #[test]
    fn direct_mode_feeds_unk_and_replicates_per_language() {
        // teacher vocab holds Italian-ish tokens; new sources are disjoint
        let it_sents = sentences(&["ciao mondo bene", "mondo ciao"]);
        let en_sents = sentences(&["hello world", "good world"]);
        let (model, sv, tv) = make_teacher(&it_sents, &en_sents, &[], 5);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let new_sources = sentences(&["buna ziua lume", "ziua mare"]);
        let set = build_many2one_distill_set(
            teacher,
            &new_sources,
            &[lang("it"), lang("nl")],
            &lang("en"),
            DistillKind::Direct,
            &[],
            &DecodeConfig { max_len: 6, ..Default::default() },
        )
        .unwrap();
        assert_eq!(set.corpora.len(), 2);
        // the distillation input becomes all-UNK against the teacher vocab
        for s in &new_sources {
            let ids = sv.encode(s);
            assert!(ids.iter().all(|&i| i == UNK));
        }
        // source side of the pairs stays the authentic new-language text
        for c in &set.corpora {
            assert_eq!(c.corpus.len(), 2);
            for ((s, _), orig) in c.corpus.pairs.iter().zip(&new_sources) {
                assert_eq!(s, orig);
            }
        }
        // both corpora share the single teacher decode
        assert_eq!(
            set.corpora[0].corpus.pairs[0].1,
            set.corpora[1].corpus.pairs[0].1
        );
    }

    #[test]
    fn pseudo_mode_maps_then_decodes() {
        let it_sents = sentences(&["ia ia ia ib ib ic"]);
        let en_sents = sentences(&["hello world good day sun moon"]);
        let (model, sv, tv) = make_teacher(&it_sents, &en_sents, &[], 11);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };

        let ro_sents = sentences(&["ra ra ra rb rb rc"]);
        let v_new = Vocabulary::build(lang("ro"), &ro_sents, 100);
        let v_old = Vocabulary::build(lang("it"), &it_sents, 100);
        let mapping = RankMapping::build(&v_new, &v_old);

        let new_sources = sentences(&["ra rb", "rc ra"]);
        let set = build_many2one_distill_set(
            teacher,
            &new_sources,
            &[lang("it")],
            &lang("en"),
            DistillKind::Pseudo,
            std::slice::from_ref(&mapping),
            &DecodeConfig { max_len: 6, ..Default::default() },
        )
        .unwrap();
        let corpus = &set.corpora[0].corpus;
        assert_eq!(corpus.pairs[0].0.to_line(), "ia ib");
        assert_eq!(corpus.pairs[1].0.to_line(), "ic ia");
        // pseudo inputs encode without UNK on the shared rank range
        for (s, _) in &corpus.pairs {
            assert!(sv.encode(s).iter().all(|&i| i != UNK));
        }
        assert!(set.provenance.mapping_checksums.contains_key("it"));
    }

    #[test]
    fn pseudo_mode_requires_mapping() {
        let it_sents = sentences(&["ia ib"]);
        let en_sents = sentences(&["hello world"]);
        let (model, sv, tv) = make_teacher(&it_sents, &en_sents, &[], 2);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let err = build_many2one_distill_set(
            teacher,
            &sentences(&["ra"]),
            &[lang("it")],
            &lang("en"),
            DistillKind::Pseudo,
            &[],
            &DecodeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingMapping(_)));
    }

    #[test]
    fn reverse_counts_and_authentic_targets() {
        // reverse teacher translates en -> {it, nl}
        let en_sents = sentences(&["hello world", "good day"]);
        let x_sents = sentences(&["ciao mondo", "goede dag"]);
        let (model, sv, tv) =
            make_teacher(&en_sents, &x_sents, &[("en", "it"), ("en", "nl")], 13);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let out = build_reverse_distill_set(
            teacher,
            &en_sents,
            &lang("en"),
            &[lang("it"), lang("nl")],
            &DecodeConfig { max_len: 6, ..Default::default() },
        )
        .unwrap();
        assert_eq!(out.forward.total_pairs(), 4); // 2 langs x 2 targets
        assert_eq!(out.reverse.total_pairs(), 4);
        for c in &out.forward.corpora {
            for ((_, y), orig) in c.corpus.pairs.iter().zip(&en_sents) {
                assert_eq!(y, orig, "forward target side must stay authentic");
            }
        }
        for c in &out.reverse.corpora {
            for (y_tagged, _) in &c.corpus.pairs {
                assert_eq!(
                    y_tagged.indicator().unwrap().as_str(),
                    format!("<en2{}>", c.for_lang)
                );
            }
        }
    }

    #[test]
    fn distilled_set_saves_with_provenance() {
        let src_sents = sentences(&["e one two"]);
        let tgt_sents = sentences(&["i uno due"]);
        let (model, sv, tv) = make_teacher(&src_sents, &tgt_sents, &[("en", "it")], 3);
        let teacher = Teacher { model: &model, src_vocab: &sv, tgt_vocab: &tv };
        let set = build_one2many_distill_set(
            teacher,
            &src_sents,
            &lang("en"),
            &[lang("it")],
            &DecodeConfig { max_len: 6, ..Default::default() },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        assert!(dir.path().join("distill-it.en").exists());
        assert!(dir.path().join("distill-it.it").exists());
        let prov: Provenance =
            serde_json::from_slice(&fs::read(dir.path().join("provenance.json")).unwrap())
                .unwrap();
        assert_eq!(prov.teacher_checksum, param_checksum(&model));
    }
}
