use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vocab::{TokenId, Vocabulary, NEWLINE, PAD};

/// Where a token sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Prompt,
    Completion,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub origin: Origin,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, origin: Origin) -> Self {
        Self { ids, origin }
    }

    pub fn external(ids: Vec<TokenId>) -> Self {
        Self::new(ids, Origin::External)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unknown lexeme {lexeme:?} at byte {position}")]
    UnknownLexeme { position: usize, lexeme: String },
}

/// Splits MiniLang source into tokens. Spellings are whitespace separated and each
/// line break is an explicit NEWLINE token.
pub fn tokenize(text: &str) -> Result<TokenSequence, LexError> {
    let vocab = Vocabulary::standard();
    let mut ids = Vec::new();
    let mut start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, ids: &mut Vec<TokenId>| {
        if let Some(s) = start.take() {
            let lexeme = &text[s..end];
            match vocab.lookup(lexeme) {
                Some(id) if id != NEWLINE && id != PAD => ids.push(id),
                _ => {
                    return Err(LexError::UnknownLexeme { position: s, lexeme: lexeme.to_string() })
                }
            }
        }
        Ok(())
    };
    for (i, ch) in text.char_indices() {
        if ch == '\n' {
            flush(&mut start, i, &mut ids)?;
            ids.push(NEWLINE);
        } else if ch.is_whitespace() {
            flush(&mut start, i, &mut ids)?;
        } else if start.is_none() {
            start = Some(i);
        }
    }
    flush(&mut start, text.len(), &mut ids)?;
    Ok(TokenSequence::external(ids))
}

/// Renders tokens as source text. PAD is dropped; NEWLINE becomes a line break.
pub fn detokenize(ids: &[TokenId]) -> String {
    let vocab = Vocabulary::standard();
    let mut out = String::new();
    let mut line_start = true;
    for &id in ids {
        if id == PAD {
            continue;
        }
        if id == NEWLINE {
            out.push('\n');
            line_start = true;
            continue;
        }
        if !line_start {
            out.push(' ');
        }
        out.push_str(vocab.spelling(id));
        line_start = false;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::vocab::{ident, COLON, FN, FN_NAME, LPAREN, RPAREN};
    use proptest::prelude::*;

    #[test]
    fn signature_tokens() {
        let seq = tokenize("fn f ( a ) :").unwrap();
        assert_eq!(seq.ids, vec![FN, FN_NAME, LPAREN, ident("a"), RPAREN, COLON]);
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").unwrap().is_empty());
        assert_eq!(detokenize(&[]), "");
    }

    #[test]
    fn unknown_lexeme_reports_position() {
        let err = tokenize("fn f @ :").unwrap_err();
        assert_eq!(err, LexError::UnknownLexeme { position: 5, lexeme: "@".into() });
    }

    #[test]
    fn pad_is_omitted() {
        assert_eq!(detokenize(&[PAD, FN, PAD, FN_NAME]), "fn f");
    }

    #[test]
    fn special_spellings_in_text() {
        let seq = tokenize("return a\n<end>").unwrap();
        assert_eq!(seq.ids.last(), Some(&crate::minilang::vocab::END));
        assert!(tokenize("<pad>").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_without_pad(raw in proptest::collection::vec(1u16..47, 0..64)) {
            let ids: Vec<TokenId> = raw.into_iter().map(TokenId).collect();
            let text = detokenize(&ids);
            prop_assert_eq!(tokenize(&text).unwrap().ids, ids);
        }
    }
}
