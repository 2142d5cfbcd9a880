//! Tokens, sentences and parallel corpora.
//!
//! Corpus files are UTF-8, one sentence per line, tokens separated by
//! whitespace. A parallel task is a pair of files `<name>.<srclang>` /
//! `<name>.<tgtlang>` with equal line counts.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single token: non-empty UTF-8 text without whitespace.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::InvalidToken(text, "empty token"));
        }
        if text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidToken(text, "token contains whitespace"));
        }
        Ok(Token(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Language identifier: non-empty lowercase ascii letters.
///
/// Letters only, so that indicator tokens `<src2tgt>` parse unambiguously
/// at the digit `2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lang(String);

impl Lang {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_lowercase() && c.is_ascii_alphabetic()) {
            return Err(Error::InvalidLang(id));
        }
        Ok(Lang(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The indicator token `<src2tgt>` selecting this pair's direction.
    pub fn indicator(src: &Lang, tgt: &Lang) -> Token {
        Token(format!("<{}2{}>", src.0, tgt.0))
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// True if `text` has the `<src2tgt>` indicator shape.
pub fn is_indicator_text(text: &str) -> bool {
    let inner = match text.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
        Some(inner) => inner,
        None => return false,
    };
    match inner.split_once('2') {
        Some((a, b)) => {
            !a.is_empty()
                && !b.is_empty()
                && a.chars().all(|c| c.is_ascii_lowercase())
                && b.chars().all(|c| c.is_ascii_lowercase())
        }
        None => false,
    }
}

/// A tokenized sentence with an optional leading indicator token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    indicator: Option<Token>,
    tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence { indicator: None, tokens }
    }

    /// Parses a whitespace-separated line; a leading `<src2tgt>` token is
    /// recognized as an indicator.
    pub fn parse(line: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for piece in line.split_whitespace() {
            tokens.push(Token::new(piece)?);
        }
        let indicator = match tokens.first() {
            Some(tok) if is_indicator_text(tok.as_str()) => Some(tokens.remove(0)),
            _ => None,
        };
        Ok(Sentence { indicator, tokens })
    }

    pub fn from_texts<I, S>(texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = texts.into_iter().map(Token::new).collect::<Result<Vec<_>>>()?;
        Ok(Sentence::new(tokens))
    }

    /// Content tokens, excluding the indicator.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn indicator(&self) -> Option<&Token> {
        self.indicator.as_ref()
    }

    /// Number of content tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All tokens in surface order, indicator first when present.
    pub fn surface(&self) -> impl Iterator<Item = &Token> {
        self.indicator.iter().chain(self.tokens.iter())
    }

    /// Returns a copy with `<src2tgt>` prepended.
    ///
    /// Errors if the sentence already carries an indicator.
    pub fn with_indicator(&self, src: &Lang, tgt: &Lang) -> Result<Sentence> {
        if let Some(ind) = &self.indicator {
            return Err(Error::IndicatorPresent(ind.as_str().to_string()));
        }
        Ok(Sentence {
            indicator: Some(Lang::indicator(src, tgt)),
            tokens: self.tokens.clone(),
        })
    }

    /// Returns a copy without any indicator.
    pub fn without_indicator(&self) -> Sentence {
        Sentence { indicator: None, tokens: self.tokens.clone() }
    }

    pub fn to_line(&self) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(self.tokens.len() + 1);
        if let Some(ind) = &self.indicator {
            parts.push(ind.as_str());
        }
        parts.extend(self.tokens.iter().map(Token::as_str));
        parts.join(" ")
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// Aligned sentence pairs with language tags and a per-pair loss weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub pairs: Vec<(Sentence, Sentence)>,
    /// Positive weight applied to every pair's loss. Default 1.
    pub weight: f64,
}

impl ParallelCorpus {
    pub fn new(src_lang: Lang, tgt_lang: Lang) -> Self {
        ParallelCorpus { src_lang, tgt_lang, pairs: Vec::new(), weight: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Loads `<stem>.<srclang>` / `<stem>.<tgtlang>`.
    pub fn load(stem: &Path, src_lang: &Lang, tgt_lang: &Lang) -> Result<Self> {
        let src_path = stem.with_extension(src_lang.as_str());
        let tgt_path = stem.with_extension(tgt_lang.as_str());
        let src_text = fs::read_to_string(&src_path)?;
        let tgt_text = fs::read_to_string(&tgt_path)?;
        let src_lines: Vec<&str> = src_text.lines().collect();
        let tgt_lines: Vec<&str> = tgt_text.lines().collect();
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Corpus(format!(
                "{} has {} lines but {} has {}",
                src_path.display(),
                src_lines.len(),
                tgt_path.display(),
                tgt_lines.len()
            )));
        }
        let mut corpus = ParallelCorpus::new(src_lang.clone(), tgt_lang.clone());
        for (s, t) in src_lines.iter().zip(tgt_lines.iter()) {
            corpus.pairs.push((Sentence::parse(s)?, Sentence::parse(t)?));
        }
        Ok(corpus)
    }

    /// Writes `<stem>.<srclang>` / `<stem>.<tgtlang>`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut src_out = String::new();
        let mut tgt_out = String::new();
        for (s, t) in &self.pairs {
            src_out.push_str(&s.to_line());
            src_out.push('\n');
            tgt_out.push_str(&t.to_line());
            tgt_out.push('\n');
        }
        fs::write(stem.with_extension(self.src_lang.as_str()), src_out)?;
        fs::write(stem.with_extension(self.tgt_lang.as_str()), tgt_out)?;
        Ok(())
    }

    /// Source sentences stripped of indicators.
    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_rejects_whitespace_and_empty() {
        assert!(Token::new("hello").is_ok());
        assert!(Token::new("").is_err());
        assert!(Token::new("a b").is_err());
        assert!(Token::new("a\tb").is_err());
    }

    #[test]
    fn lang_rules() {
        assert!(Lang::new("en").is_ok());
        assert!(Lang::new("EN").is_err());
        assert!(Lang::new("e2").is_err());
        assert!(Lang::new("").is_err());
    }

    #[test]
    fn indicator_shape() {
        assert!(is_indicator_text("<en2it>"));
        assert!(is_indicator_text("<aa2bb>"));
        assert!(!is_indicator_text("<en-it>"));
        assert!(!is_indicator_text("en2it"));
        assert!(!is_indicator_text("<2it>"));
        assert!(!is_indicator_text("<en2>"));
    }

    #[test]
    fn with_indicator_prepends_and_rejects_double() {
        let en = Lang::new("en").unwrap();
        let it = Lang::new("it").unwrap();
        let s = Sentence::from_texts(["you", "probably", "saw", "it", "on", "the", "news", "."]).unwrap();
        let tagged = s.with_indicator(&en, &it).unwrap();
        assert_eq!(tagged.to_line(), "<en2it> you probably saw it on the news .");
        assert!(tagged.with_indicator(&en, &it).is_err());
    }

    #[test]
    fn with_indicator_on_empty_sentence() {
        let en = Lang::new("en").unwrap();
        let it = Lang::new("it").unwrap();
        let s = Sentence::new(vec![]);
        let tagged = s.with_indicator(&en, &it).unwrap();
        assert_eq!(tagged.to_line(), "<en2it>");
        assert_eq!(tagged.len(), 0);
    }

    #[test]
    fn parse_recognizes_indicator() {
        let s = Sentence::parse("<en2it> hello world").unwrap();
        assert_eq!(s.indicator().unwrap().as_str(), "<en2it>");
        assert_eq!(s.len(), 2);
        let roundtrip = Sentence::parse(&s.to_line()).unwrap();
        assert_eq!(roundtrip, s);
    }

    #[test]
    fn corpus_roundtrip_and_line_count_check() {
        let dir = tempfile::tempdir().unwrap();
        let aa = Lang::new("aa").unwrap();
        let bb = Lang::new("bb").unwrap();
        let mut c = ParallelCorpus::new(aa.clone(), bb.clone());
        c.pairs.push((
            Sentence::from_texts(["x", "y"]).unwrap(),
            Sentence::from_texts(["u", "v", "w"]).unwrap(),
        ));
        let stem = dir.path().join("train");
        c.save(&stem).unwrap();
        let back = ParallelCorpus::load(&stem, &aa, &bb).unwrap();
        assert_eq!(back.pairs, c.pairs);

        std::fs::write(dir.path().join("train.bb"), "u v w\nextra\n").unwrap();
        assert!(ParallelCorpus::load(&stem, &aa, &bb).is_err());
    }
}
