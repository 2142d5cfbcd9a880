//! Byte pair encoding over whitespace-pretokenized text.
//!
//! Words are split into characters plus a trailing end-of-word marker;
//! learning greedily merges the most frequent adjacent symbol pair, ties
//! broken by lexicographic pair order. Applying a model replays the merges
//! in learned order, so segmentation is deterministic. Model file format:
//! one `left<SPACE>right` merge per line, in learned order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Sentence, Token};
use crate::error::{Error, Result};

/// End-of-word marker symbol.
pub const EOW: &str = "</w>";

/// An ordered list of learned symbol-pair merges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(EOW.to_string());
    syms
}

fn merge_in_place(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let joined = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = joined;
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

impl BpeModel {
    /// Learns `num_merges` greedy pair merges from tokenized sentences.
    pub fn learn<'a, I>(corpus: I, num_merges: usize) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut word_freq: HashMap<String, u64> = HashMap::new();
        for sentence in corpus {
            for token in sentence.tokens() {
                *word_freq.entry(token.as_str().to_string()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<String>, u64)> = {
            let mut w: Vec<(String, u64)> = word_freq.into_iter().collect();
            w.sort(); // deterministic iteration order
            w.into_iter().map(|(word, freq)| (word_symbols(&word), freq)).collect()
        };

        let mut merges = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *pair_counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += freq;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let (pair, count) = match best {
                Some(found) => found,
                None => break,
            };
            if count == 0 {
                break;
            }
            for (syms, _) in &mut words {
                merge_in_place(syms, &pair);
            }
            merges.push(pair);
        }
        BpeModel { merges }
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segments one word into subword symbols by replaying the merges.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        for pair in &self.merges {
            merge_in_place(&mut syms, pair);
        }
        syms
    }

    /// Applies BPE to every token of a sentence. The indicator, if present,
    /// is left unsegmented.
    pub fn apply(&self, sentence: &Sentence) -> Sentence {
        let mut out: Vec<Token> = Vec::new();
        for token in sentence.tokens() {
            for sym in self.segment_word(token.as_str()) {
                out.push(Token::new(sym).expect("bpe symbols contain no whitespace"));
            }
        }
        let segmented = Sentence::new(out);
        match sentence.indicator() {
            Some(ind) => Sentence::parse(&format!("{} {}", ind, segmented.to_line()))
                .expect("valid line"),
            None => segmented,
        }
    }

    /// Inverts [`BpeModel::apply`]: joins symbols and splits on the
    /// end-of-word marker.
    pub fn detokenize(sentence: &Sentence) -> Result<Sentence> {
        let joined: String = sentence.tokens().iter().map(Token::as_str).collect();
        let mut words: Vec<Token> = Vec::new();
        for word in joined.split(EOW) {
            if !word.is_empty() {
                words.push(Token::new(word)?);
            }
        }
        let restored = Sentence::new(words);
        match sentence.indicator() {
            Some(ind) => Ok(Sentence::parse(&format!("{} {}", ind, restored.to_line()))?),
            None => Ok(restored),
        }
    }

    /// One merge pair per line, learned order.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = String::new();
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut merges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                Error::Corpus(format!("{}:{}: bad merge line", path.display(), lineno + 1))
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeModel { merges })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentences(lines: &[&str]) -> Vec<Sentence> {
        lines.iter().map(|l| Sentence::parse(l).unwrap()).collect()
    }

    #[test]
    fn zero_merges_splits_to_chars_plus_marker() {
        let model = BpeModel::learn(&sentences(&["low"]), 0);
        assert_eq!(model.num_merges(), 0);
        let s = Sentence::parse("low").unwrap();
        let applied = model.apply(&s);
        assert_eq!(applied.to_line(), "l o w </w>");
    }

    #[test]
    fn first_merge_is_most_frequent_pair_with_tie_break() {
        // "low low lower": pairs (l,o) and (o,w) both occur 3 times;
        // (w,</w>) occurs 2, (w,e) (e,r) (r,</w>) once. Lexicographic
        // tie-break picks (l,o).
        let model = BpeModel::learn(&sentences(&["low low lower"]), 1);
        assert_eq!(model.merges()[0], ("l".to_string(), "o".to_string()));
    }

    #[test]
    fn apply_replays_merges_in_order() {
        let corpus = sentences(&["low low lower"]);
        let model = BpeModel::learn(&corpus, 3);
        // merge 1: (l,o) -> lo ; pair counts then have (lo,w) 3x
        // merge 2: (lo,w) -> low ; then (low,</w>) 2x
        // merge 3: (low,</w>)
        assert_eq!(
            model.merges(),
            &[
                ("l".into(), "o".into()),
                ("lo".into(), "w".into()),
                ("low".into(), "</w>".into())
            ]
        );
        assert_eq!(model.segment_word("low"), vec!["low</w>"]);
        assert_eq!(model.segment_word("lower"), vec!["low", "e", "r", "</w>"]);
    }

    #[test]
    fn detokenize_inverts_apply() {
        let corpus = sentences(&["the quick brown fox", "the lazy dog"]);
        let model = BpeModel::learn(&corpus, 10);
        for s in &corpus {
            let applied = model.apply(s);
            assert_eq!(&BpeModel::detokenize(&applied).unwrap(), s);
        }
        // and with zero merges too
        let raw = BpeModel::learn(&corpus, 0);
        for s in &corpus {
            assert_eq!(&BpeModel::detokenize(&raw.apply(s)).unwrap(), s);
        }
    }

    #[test]
    fn learning_is_deterministic_and_order_independent() {
        let a = BpeModel::learn(&sentences(&["ab ab", "cd"]), 5);
        let b = BpeModel::learn(&sentences(&["cd", "ab ab"]), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = BpeModel::learn(&sentences(&["low low lower lowest"]), 6);
        let path = dir.path().join("bpe.merges");
        model.save(&path).unwrap();
        assert_eq!(BpeModel::load(&path).unwrap(), model);
    }
}
