//! Deterministic synthetic language pairs with known oracle translations.
//!
//! A base corpus draws token indices i.i.d. from a Zipf distribution; a
//! language realizes base index `r` as its surface token `<lang><π(r)>`
//! and optionally applies a local reordering (adjacent swaps with a fixed
//! period, a self-inverting permutation of positions). Realization is
//! bijective per sentence, so the oracle translation between any two
//! languages is `realize(L2, unrealize(L1, s))`.
//!
//! The base naming convention is language `t` with the identity
//! permutation and no reordering: `realize` for that language is the
//! identity on base sentences.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, ParallelCorpus, Sentence, Token};
use crate::error::{Error, Result};

/// Stable seed derivation for independent randomness streams.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = crate::checkpoint::fnv1a64(&base.to_le_bytes());
    for p in parts {
        h ^= crate::checkpoint::fnv1a64(p.as_bytes());
        h = h.wrapping_mul(0x100000001b3);
    }
    // splitmix64 finalizer
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A substitution-plus-reordering cipher over base tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub lang: Lang,
    /// π as an explicit list: base index `r` surfaces as index `π[r]`.
    pub permutation: Vec<usize>,
    /// Adjacent-swap period (>= 2); `None` keeps base order.
    pub reorder_period: Option<usize>,
}

impl SyntheticLanguage {
    /// Identity-permutation language over `vocab_size` base tokens.
    pub fn rank_preserving(lang: Lang, vocab_size: usize) -> Self {
        SyntheticLanguage { lang, permutation: (0..vocab_size).collect(), reorder_period: None }
    }

    /// Language with a seeded shuffled permutation.
    pub fn shuffled(lang: Lang, vocab_size: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..vocab_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        SyntheticLanguage { lang, permutation: perm, reorder_period: None }
    }

    pub fn with_reorder(mut self, period: usize) -> Self {
        self.reorder_period = Some(period);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.permutation.len();
        let mut seen = vec![false; n];
        for &p in &self.permutation {
            if p >= n || seen[p] {
                return Err(Error::InvalidSynthSpec(format!(
                    "permutation of {} is not a bijection",
                    self.lang
                )));
            }
            seen[p] = true;
        }
        if let Some(p) = self.reorder_period {
            if p < 2 {
                return Err(Error::InvalidSynthSpec(
                    "reorder period below 2 would overlap swap pairs".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_rank_preserving(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (r, &p) in self.permutation.iter().enumerate() {
            inv[p] = r;
        }
        inv
    }

    pub fn surface_token(&self, index: usize) -> Token {
        Token::new(format!("{}{}", self.lang, index)).expect("valid surface token")
    }

    fn surface_index(&self, token: &Token) -> Result<usize> {
        let text = token.as_str();
        let rest = text.strip_prefix(self.lang.as_str()).ok_or_else(|| {
            Error::InvalidSynthSpec(format!("token {text:?} is not in language {}", self.lang))
        })?;
        let idx: usize = rest.parse().map_err(|_| {
            Error::InvalidSynthSpec(format!("token {text:?} is not in language {}", self.lang))
        })?;
        if idx >= self.permutation.len() {
            return Err(Error::InvalidSynthSpec(format!("token {text:?} out of vocabulary")));
        }
        Ok(idx)
    }

    fn reorder(&self, tokens: &mut [Token]) {
        if let Some(p) = self.reorder_period {
            let mut k = 0;
            while k + 1 < tokens.len() {
                tokens.swap(k, k + 1);
                k += p;
            }
        }
    }

    /// Applies π token-wise, then the reorder rule.
    pub fn realize(&self, base: &Sentence) -> Result<Sentence> {
        let mut tokens = Vec::with_capacity(base.len());
        for tok in base.tokens() {
            let rest = tok.as_str().strip_prefix('t').ok_or_else(|| {
                Error::InvalidSynthSpec(format!("base token {tok:?} must look like t<index>"))
            })?;
            let r: usize = rest.parse().map_err(|_| {
                Error::InvalidSynthSpec(format!("base token {tok:?} must look like t<index>"))
            })?;
            if r >= self.permutation.len() {
                return Err(Error::InvalidSynthSpec(format!("base token {tok:?} out of range")));
            }
            tokens.push(self.surface_token(self.permutation[r]));
        }
        self.reorder(&mut tokens);
        Ok(Sentence::new(tokens))
    }

    /// Inverse of [`SyntheticLanguage::realize`].
    pub fn unrealize(&self, sentence: &Sentence) -> Result<Sentence> {
        let mut tokens: Vec<Token> = sentence.tokens().to_vec();
        self.reorder(&mut tokens); // the reorder rule is an involution
        let inv = self.inverse_permutation();
        let mut base = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            let idx = self.surface_index(tok)?;
            base.push(Token::new(format!("t{}", inv[idx]))?);
        }
        Ok(Sentence::new(base))
    }
}

/// The oracle translation between two languages sharing a base vocabulary.
pub fn oracle_translate(
    from: &SyntheticLanguage,
    to: &SyntheticLanguage,
    sentence: &Sentence,
) -> Result<Sentence> {
    to.realize(&from.unrealize(sentence)?)
}

/// Full description of one synthetic parallel task; serialized as the task
/// manifest, sufficient for bit-exact regeneration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub src: SyntheticLanguage,
    pub tgt: SyntheticLanguage,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub zipf_s: f64,
    pub len_range: (usize, usize),
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        self.src.validate()?;
        self.tgt.validate()?;
        if self.src.vocab_size() != self.tgt.vocab_size() {
            return Err(Error::InvalidSynthSpec(
                "source and target languages must share the base vocabulary size".into(),
            ));
        }
        if self.src.vocab_size() < 10 {
            return Err(Error::InvalidSynthSpec("base vocabulary below 10 tokens".into()));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::InvalidSynthSpec(format!(
                "bad length range {:?}",
                self.len_range
            )));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidSynthSpec("split sizes must be positive".into()));
        }
        Ok(())
    }
}

fn zipf_cdf(vocab_size: usize, s: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(vocab_size);
    let mut acc = 0.0;
    for r in 0..vocab_size {
        acc += 1.0 / ((r + 1) as f64).powf(s);
        cdf.push(acc);
    }
    let z = acc;
    for c in &mut cdf {
        *c /= z;
    }
    cdf
}

fn sample_index(cdf: &[f64], u: f64) -> usize {
    match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) => i,
        Err(i) => i.min(cdf.len() - 1),
    }
}

/// Draws `size` base sentences of i.i.d. Zipf tokens `t0..t<V-1>`, where
/// rank r has probability proportional to `1/(r+1)^s`. Deterministic in
/// `seed`, with an independent stream per sentence.
pub fn gen_base_corpus(
    seed: u64,
    size: usize,
    vocab_size: usize,
    zipf_s: f64,
    len_range: (usize, usize),
) -> Result<Vec<Sentence>> {
    if vocab_size < 10 {
        return Err(Error::InvalidSynthSpec("base vocabulary below 10 tokens".into()));
    }
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(Error::InvalidSynthSpec(format!("bad length range {len_range:?}")));
    }
    let cdf = zipf_cdf(vocab_size, zipf_s);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["sentence", &i.to_string()]));
        let len = rng.gen_range(len_range.0..=len_range.1);
        let tokens = (0..len)
            .map(|_| {
                let r = sample_index(&cdf, rng.gen::<f64>());
                Token::new(format!("t{r}")).expect("base token")
            })
            .collect();
        out.push(Sentence::new(tokens));
    }
    Ok(out)
}

/// File names written per task directory.
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const MANIFEST_NAME: &str = "task.manifest";

/// Generates the task's parallel files under `dir`, target side being the
/// oracle translation of the source side, plus the manifest.
pub fn gen_task(task: &SyntheticTask, dir: &Path) -> Result<GeneratedTask> {
    task.validate()?;
    fs::create_dir_all(dir)?;
    for (split, size) in
        [("train", task.train_size), ("dev", task.dev_size), ("test", task.test_size)]
    {
        let split_seed = derive_seed(task.seed, &["split", split]);
        let base = gen_base_corpus(
            split_seed,
            size,
            task.src.vocab_size(),
            task.zipf_s,
            task.len_range,
        )?;
        let mut corpus = ParallelCorpus::new(task.src.lang.clone(), task.tgt.lang.clone());
        for b in &base {
            corpus.pairs.push((task.src.realize(b)?, task.tgt.realize(b)?));
        }
        corpus.save(&dir.join(split))?;
    }
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_vec_pretty(task)?)?;
    Ok(GeneratedTask { dir: dir.to_path_buf(), task: task.clone() })
}

pub fn load_manifest(dir: &Path) -> Result<SyntheticTask> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_NAME))?)?)
}

#[derive(Clone, Debug)]
pub struct GeneratedTask {
    pub dir: PathBuf,
    pub task: SyntheticTask,
}
