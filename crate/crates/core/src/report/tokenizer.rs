//! Closed-vocabulary tokenizer for report and prompt text.
//!
//! Whole grammar words (keywords, biomarker names, units, flags, templates,
//! labels) are single symbols; numbers and note text fall back to one symbol
//! per character. Tokenization is greedy longest match.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::ast::{Flag, Template};
use super::dsl::{DIAGNOSIS, FINDING, INFER, NOTE};
use crate::cohort::{BiomarkerSchema, DiagnosisLabel, Unit};
use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const QUERY: &str = "QUERY";
pub const PROMPT_TASK: &str = "interpret_retina";

/// The instruction every report answers.
pub fn prompt_text() -> String {
    format!("{QUERY} {PROMPT_TASK}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary")]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<String> = vec![EOS.into(), "\n".into(), " ".into()];
            symbols.extend([",", ".", "-"].map(String::from));
            symbols.extend((0..10).map(|d| d.to_string()));
            symbols.extend([FINDING, INFER, DIAGNOSIS, NOTE, QUERY, PROMPT_TASK].map(String::from));
            symbols.extend(DiagnosisLabel::ALL.iter().map(|l| l.as_str().to_string()));
            symbols.extend(Template::all().iter().map(|t| t.id().to_string()));
            symbols.extend(
                BiomarkerSchema::standard()
                    .entries()
                    .iter()
                    .map(|e| e.name.clone()),
            );
            symbols.extend(Unit::ALL.iter().map(|u| u.symbol().to_string()));
            symbols.extend(Flag::ALL.iter().map(|f| f.as_str().to_string()));
            symbols.extend(('a'..='z').map(String::from));
            symbols.push("_".into());
            Vocabulary::new(symbols).expect("standard vocabulary has distinct symbols")
        })
    }

    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || lookup.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("vocabulary symbol {s:?} is empty or repeated")));
            }
        }
        Ok(Self { symbols, lookup })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id.index()).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.lookup.get(symbol).map(|&i| TokenId(i))
    }

    pub fn eos(&self) -> TokenId {
        self.id(EOS).expect("vocabulary contains the end-of-report symbol")
    }

    /// Digits and the characters that only occur inside numbers.
    pub fn is_numeric(&self, id: TokenId) -> bool {
        self.symbol(id).is_some_and(|s| {
            s.len() == 1 && (s.as_bytes()[0].is_ascii_digit() || s == "." || s == "-")
        })
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let best = self
                .symbols
                .iter()
                .enumerate()
                .filter(|(_, s)| rest.starts_with(s.as_str()))
                .max_by_key(|(i, s)| (s.len(), std::cmp::Reverse(*i)));
            match best {
                Some((i, s)) => {
                    out.push(TokenId(i as u32));
                    pos += s.len();
                }
                None => {
                    return Err(Error::Tokenize {
                        position: pos,
                        ch: rest.chars().next().expect("non-empty remainder"),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &t in tokens {
            let s = self.symbol(t).ok_or_else(|| {
                Error::Contract(format!("token id {} outside vocabulary of {}", t.0, self.len()))
            })?;
            out.push_str(s);
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct RawVocabulary {
    symbols: Vec<String>,
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = Error;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        Vocabulary::new(raw.symbols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(Vocabulary::standard().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn diagnosis_line_has_a_fixed_encoding() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("DIAGNOSIS Normal").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(ids, v.tokenize("DIAGNOSIS Normal").unwrap());
        assert_eq!(v.symbol(ids[0]), Some("DIAGNOSIS"));
        assert_eq!(v.symbol(ids[2]), Some("Normal"));
    }

    #[test]
    fn longest_match_prefers_whole_words() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("rnfl_average 93.50").unwrap();
        assert_eq!(v.symbol(ids[0]), Some("rnfl_average"));
        assert_eq!(ids.len(), 1 + 1 + 5);
        assert!(ids[2..].iter().all(|&t| v.is_numeric(t)));
    }

    #[test]
    fn out_of_alphabet_character_is_reported() {
        match Vocabulary::standard().tokenize("DIAGNOSIS Normal!") {
            Err(Error::Tokenize { position, ch }) => assert_eq!((position, ch), (16, '!')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vocabulary_size_is_about_one_hundred_twenty() {
        let n = Vocabulary::standard().len();
        assert!((100..=140).contains(&n), "{n}");
    }
}
