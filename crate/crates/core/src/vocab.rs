//! Frequency-sorted vocabularies, incremental union, encode/decode and
//! frequency-rank token mappings.
//!
//! A vocabulary is an append-only indexed token list. The four reserved
//! tokens `PAD`, `UNK`, `BOS`, `EOS` sit at fixed indices 0-3; indicator
//! tokens are appended as reserved entries when registered. Content entries
//! carry corpus counts, and a token's *rank* is its 0-based position among
//! content entries only. Reserved entries never participate in rank
//! mappings.
//!
//! Vocabulary file format: one `token<TAB>count` line per entry, in index
//! order (for a freshly built vocabulary that is reserved tokens first, then
//! content in rank order).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::corpus::{is_indicator_text, Lang, Sentence, Token};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["PAD", "UNK", "BOS", "EOS"];

#[derive(Clone, Debug, PartialEq, Eq)]
enum EntryKind {
    Reserved,
    Indicator,
    Content,
}

#[derive(Clone, Debug)]
struct Entry {
    token: Token,
    count: u64,
    kind: EntryKind,
}

/// Frequency-ranked token inventory for one language.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    lang: Lang,
    entries: Vec<Entry>,
    lookup: HashMap<String, usize>,
}

impl Vocabulary {
    /// A vocabulary holding only the four reserved tokens.
    pub fn reserved_only(lang: Lang) -> Self {
        let mut v = Vocabulary { lang, entries: Vec::new(), lookup: HashMap::new() };
        for text in RESERVED {
            v.push(Token::new(text).expect("reserved token"), 0, EntryKind::Reserved);
        }
        v
    }

    fn push(&mut self, token: Token, count: u64, kind: EntryKind) -> usize {
        let idx = self.entries.len();
        self.lookup.insert(token.as_str().to_string(), idx);
        self.entries.push(Entry { token, count, kind });
        idx
    }

    /// Builds a frequency-sorted vocabulary from tokenized sentences.
    ///
    /// Content entries are sorted by count descending, ties broken by token
    /// text ascending, then truncated to `max_size`. Indicator-shaped tokens
    /// in the corpus are registered as reserved indicator entries instead of
    /// counted content.
    pub fn build<'a, I>(lang: Lang, corpus: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut counts: HashMap<&Token, u64> = HashMap::new();
        let mut indicators: Vec<&Token> = Vec::new();
        for sentence in corpus {
            if let Some(ind) = sentence.indicator() {
                if !indicators.contains(&ind) {
                    indicators.push(ind);
                }
            }
            for token in sentence.tokens() {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&Token, u64)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_size);

        let mut v = Vocabulary::reserved_only(lang);
        for ind in indicators {
            v.push(ind.clone(), 0, EntryKind::Indicator);
        }
        for (token, count) in ranked {
            v.push(token.clone(), count, EntryKind::Content);
        }
        v
    }

    pub fn lang(&self) -> &Lang {
        &self.lang
    }

    /// Total entry count, reserved included.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    /// Number of content (non-reserved, non-indicator) entries.
    pub fn content_len(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Content).count()
    }

    pub fn token(&self, index: usize) -> Option<&Token> {
        self.entries.get(index).map(|e| &e.token)
    }

    pub fn count(&self, index: usize) -> Option<u64> {
        self.entries.get(index).map(|e| e.count)
    }

    pub fn index_of(&self, text: &str) -> Option<usize> {
        self.lookup.get(text).copied()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.lookup.contains_key(text)
    }

    /// Registers an indicator token as a reserved entry; returns its index.
    /// Idempotent for an already-registered indicator.
    pub fn register_indicator(&mut self, token: &Token) -> Result<usize> {
        if !is_indicator_text(token.as_str()) {
            return Err(Error::InvalidToken(
                token.as_str().to_string(),
                "not an indicator token",
            ));
        }
        if let Some(idx) = self.index_of(token.as_str()) {
            return Ok(idx);
        }
        Ok(self.push(token.clone(), 0, EntryKind::Indicator))
    }

    /// Indices of content entries in index order. Because growth is
    /// append-only this is also rank order for vocabularies built by
    /// [`Vocabulary::build`].
    fn content_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Content)
            .map(|(i, _)| i)
    }

    /// Token at content rank `rank`.
    pub fn token_at_rank(&self, rank: usize) -> Option<&Token> {
        self.content_indices().nth(rank).map(|i| &self.entries[i].token)
    }

    /// Content rank of `text`, if it is a content token.
    pub fn rank_of(&self, text: &str) -> Option<usize> {
        let idx = self.index_of(text)?;
        if self.entries[idx].kind != EntryKind::Content {
            return None;
        }
        Some(self.content_indices().take_while(|&i| i < idx).count())
    }

    /// True when content counts are weakly decreasing in rank order, i.e.
    /// the vocabulary is frequency-sorted.
    pub fn is_rank_sorted(&self) -> bool {
        let counts: Vec<u64> = self
            .entries
            .iter()
            .filter(|e| e.kind == EntryKind::Content)
            .map(|e| e.count)
            .collect();
        counts.windows(2).all(|w| w[0] >= w[1])
    }

    /// True when `self` extends `old` append-only: every index of `old`
    /// holds the same token in `self`.
    pub fn extends(&self, old: &Vocabulary) -> bool {
        old.len() <= self.len()
            && (0..old.len()).all(|i| self.entries[i].token == old.entries[i].token)
    }

    /// Append-only union: every index of `self` keeps its index; tokens of
    /// `task` absent from `self` are appended in `task` rank order (new
    /// indicators go first, mirroring build order). Counts of shared tokens
    /// merge by max.
    pub fn union(&self, task: &Vocabulary) -> Vocabulary {
        let mut out = self.clone();
        for entry in &task.entries {
            match out.index_of(entry.token.as_str()) {
                Some(idx) => {
                    let merged = out.entries[idx].count.max(entry.count);
                    out.entries[idx].count = merged;
                }
                None => {
                    if entry.kind == EntryKind::Reserved {
                        continue;
                    }
                    out.push(entry.token.clone(), entry.count, entry.kind.clone());
                }
            }
        }
        out
    }

    /// Maps tokens to indices; out-of-vocabulary tokens map to `UNK`.
    /// No BOS/EOS framing is applied here.
    pub fn encode(&self, sentence: &Sentence) -> Vec<usize> {
        sentence
            .surface()
            .map(|t| self.index_of(t.as_str()).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Vocabulary::encode`] on in-vocab tokens; the `UNK`
    /// index decodes to the literal token `UNK`.
    pub fn decode(&self, indices: &[usize]) -> Result<Sentence> {
        let mut tokens = Vec::with_capacity(indices.len());
        let mut indicator = None;
        for (pos, &idx) in indices.iter().enumerate() {
            let entry = self
                .entries
                .get(idx)
                .ok_or(Error::IndexOutOfRange { index: idx, size: self.entries.len() })?;
            if pos == 0 && entry.kind == EntryKind::Indicator {
                indicator = Some(entry.token.clone());
            } else {
                tokens.push(entry.token.clone());
            }
        }
        let mut sentence = Sentence::new(tokens);
        if let Some(ind) = indicator {
            // re-attach via parse to keep the invariant in one place
            sentence = Sentence::parse(&format!("{} {}", ind, sentence.to_line()))?;
        }
        Ok(sentence)
    }

    /// Writes one `token<TAB>count` line per entry, in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(entry.token.as_str());
            out.push('\t');
            out.push_str(&entry.count.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a vocabulary file. The first four lines must be the reserved
    /// tokens; indicator entries are recognized by their `<src2tgt>` shape.
    pub fn load(path: &Path, lang: Lang) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Vocabulary { lang, entries: Vec::new(), lookup: HashMap::new() };
        for (lineno, line) in text.lines().enumerate() {
            let (tok_text, count_text) = line.split_once('\t').ok_or_else(|| {
                Error::Corpus(format!("{}:{}: missing tab", path.display(), lineno + 1))
            })?;
            let count: u64 = count_text.parse().map_err(|_| {
                Error::Corpus(format!("{}:{}: bad count {count_text:?}", path.display(), lineno + 1))
            })?;
            let kind = if lineno < 4 {
                if tok_text != RESERVED[lineno] {
                    return Err(Error::Corpus(format!(
                        "{}: line {} must be reserved token {}",
                        path.display(),
                        lineno + 1,
                        RESERVED[lineno]
                    )));
                }
                EntryKind::Reserved
            } else if is_indicator_text(tok_text) {
                EntryKind::Indicator
            } else {
                EntryKind::Content
            };
            v.push(Token::new(tok_text)?, count, kind);
        }
        if v.entries.len() < 4 {
            return Err(Error::Corpus(format!("{}: missing reserved tokens", path.display())));
        }
        Ok(v)
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} vocabulary ({} entries, {} content)", self.lang, self.len(), self.content_len())
    }
}

/// Rank-aligned token substitution from one language's vocabulary into
/// another's: the token at rank `j` in the source vocabulary maps to the
/// token at rank `j` in the target vocabulary, or to `UNK` when the target
/// vocabulary has no rank `j`.
#[derive(Clone, Debug)]
pub struct RankMapping {
    from_lang: Lang,
    to_lang: Lang,
    /// Source content token text -> target token (None = UNK).
    pairs: HashMap<String, Option<Token>>,
    shared_ranks: usize,
}

impl RankMapping {
    /// Builds the mapping between two frequency-sorted vocabularies.
    ///
    /// Both inputs are expected rank-sorted (as produced by
    /// [`Vocabulary::build`] and persisted at training time).
    pub fn build(v_new: &Vocabulary, v_old: &Vocabulary) -> Self {
        debug_assert!(v_new.is_rank_sorted() && v_old.is_rank_sorted());
        let old_ranked: Vec<&Token> = (0..v_old.content_len())
            .map(|r| v_old.token_at_rank(r).expect("rank in range"))
            .collect();
        let mut pairs = HashMap::new();
        for (rank, idx) in v_new.content_indices().enumerate() {
            let src = v_new.entries[idx].token.as_str().to_string();
            pairs.insert(src, old_ranked.get(rank).map(|t| (*t).clone()));
        }
        RankMapping {
            from_lang: v_new.lang.clone(),
            to_lang: v_old.lang.clone(),
            shared_ranks: v_new.content_len().min(v_old.content_len()),
            pairs,
        }
    }

    pub fn from_lang(&self) -> &Lang {
        &self.from_lang
    }

    pub fn to_lang(&self) -> &Lang {
        &self.to_lang
    }

    /// Ranks covered by both vocabularies.
    pub fn shared_ranks(&self) -> usize {
        self.shared_ranks
    }

    /// Target token for a source token: `None` encodes UNK (rank beyond the
    /// target vocabulary or source token outside the mapping domain).
    pub fn map_token(&self, token: &Token) -> Option<&Token> {
        self.pairs.get(token.as_str()).and_then(|t| t.as_ref())
    }

    /// Stable digest over the full mapping table, for provenance records.
    pub fn checksum(&self) -> String {
        let mut lines: Vec<String> = self
            .pairs
            .iter()
            .map(|(from, to)| {
                format!("{}\t{}", from, to.as_ref().map(|t| t.as_str()).unwrap_or("UNK"))
            })
            .collect();
        lines.sort();
        let joined = lines.join("\n");
        format!("{:016x}", crate::checkpoint::fnv1a64(joined.as_bytes()))
    }

    /// Token-wise substitution building a pseudo input. Word order and
    /// sentence length are preserved; tokens outside the mapping domain and
    /// ranks beyond the target vocabulary become the literal `UNK` token.
    /// An indicator, if present, is carried over unchanged.
    pub fn apply(&self, sentence: &Sentence) -> Sentence {
        let unk = Token::new(RESERVED[UNK]).expect("reserved token");
        let tokens: Vec<Token> = sentence
            .tokens()
            .iter()
            .map(|t| self.map_token(t).cloned().unwrap_or_else(|| unk.clone()))
            .collect();
        let mapped = Sentence::new(tokens);
        match sentence.indicator() {
            Some(ind) => {
                Sentence::parse(&format!("{} {}", ind, mapped.to_line())).expect("valid line")
            }
            None => mapped,
        }
    }
}
