use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Index of a token in the [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Lexical class of a vocabulary entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Newline,
    Keyword,
    FunctionName,
    Punctuation,
    Operator,
    Comparison,
    Digit,
    Identifier,
    CommentWord,
}

impl TokenClass {
    /// Vocabulary-level code classification. PAD and comment words are not code.
    pub fn is_code(self) -> bool {
        !matches!(self, TokenClass::CommentWord)
    }
}

pub const PAD: TokenId = TokenId(0);
pub const END: TokenId = TokenId(1);
pub const NEWLINE: TokenId = TokenId(2);
pub const FN: TokenId = TokenId(3);
pub const LET: TokenId = TokenId(4);
pub const RETURN: TokenId = TokenId(5);
pub const IF: TokenId = TokenId(6);
pub const ELSE: TokenId = TokenId(7);
pub const FN_NAME: TokenId = TokenId(8);
pub const LPAREN: TokenId = TokenId(9);
pub const RPAREN: TokenId = TokenId(10);
pub const COLON: TokenId = TokenId(11);
pub const COMMA: TokenId = TokenId(12);
pub const ASSIGN: TokenId = TokenId(13);
pub const HASH: TokenId = TokenId(14);
pub const PLUS: TokenId = TokenId(15);
pub const MINUS: TokenId = TokenId(16);
pub const STAR: TokenId = TokenId(17);
pub const PERCENT: TokenId = TokenId(18);
pub const LESS: TokenId = TokenId(19);
pub const EQ_EQ: TokenId = TokenId(20);
const FIRST_DIGIT: u16 = 21;
const FIRST_IDENT: u16 = 31;
const FIRST_COMMENT: u16 = 39;

/// Spelling of the NEWLINE token inside token-level listings; in source text it is a line break.
pub const NEWLINE_SPELLING: &str = "\n";

const TABLE: [(&str, TokenClass); 47] = [
    ("<pad>", TokenClass::Special),
    ("<end>", TokenClass::Special),
    (NEWLINE_SPELLING, TokenClass::Newline),
    ("fn", TokenClass::Keyword),
    ("let", TokenClass::Keyword),
    ("return", TokenClass::Keyword),
    ("if", TokenClass::Keyword),
    ("else", TokenClass::Keyword),
    ("f", TokenClass::FunctionName),
    ("(", TokenClass::Punctuation),
    (")", TokenClass::Punctuation),
    (":", TokenClass::Punctuation),
    (",", TokenClass::Punctuation),
    ("=", TokenClass::Punctuation),
    ("#", TokenClass::Punctuation),
    ("+", TokenClass::Operator),
    ("-", TokenClass::Operator),
    ("*", TokenClass::Operator),
    ("%", TokenClass::Operator),
    ("<", TokenClass::Comparison),
    ("==", TokenClass::Comparison),
    ("0", TokenClass::Digit),
    ("1", TokenClass::Digit),
    ("2", TokenClass::Digit),
    ("3", TokenClass::Digit),
    ("4", TokenClass::Digit),
    ("5", TokenClass::Digit),
    ("6", TokenClass::Digit),
    ("7", TokenClass::Digit),
    ("8", TokenClass::Digit),
    ("9", TokenClass::Digit),
    ("a", TokenClass::Identifier),
    ("b", TokenClass::Identifier),
    ("c", TokenClass::Identifier),
    ("x", TokenClass::Identifier),
    ("y", TokenClass::Identifier),
    ("z", TokenClass::Identifier),
    ("t", TokenClass::Identifier),
    ("u", TokenClass::Identifier),
    ("note", TokenClass::CommentWord),
    ("this", TokenClass::CommentWord),
    ("adds", TokenClass::CommentWord),
    ("value", TokenClass::CommentWord),
    ("result", TokenClass::CommentWord),
    ("temp", TokenClass::CommentWord),
    ("fast", TokenClass::CommentWord),
    ("todo", TokenClass::CommentWord),
];

/// Fixed MiniLang vocabulary. Ids are positions in declaration order.
#[derive(Debug)]
pub struct Vocabulary {
    spellings: Vec<&'static str>,
    classes: Vec<TokenClass>,
    by_spelling: HashMap<&'static str, TokenId>,
    hash: u64,
}

impl Vocabulary {
    /// The process-wide standard vocabulary.
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| Vocabulary::from_table(&TABLE))
    }

    fn from_table(table: &[(&'static str, TokenClass)]) -> Self {
        let spellings: Vec<&'static str> = table.iter().map(|(s, _)| *s).collect();
        let classes = table.iter().map(|(_, c)| *c).collect();
        let by_spelling = spellings
            .iter()
            .enumerate()
            .map(|(i, s)| (*s, TokenId(i as u16)))
            .collect();
        let mut hasher = Sha256::new();
        for s in &spellings {
            hasher.update(s.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let hash = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Self { spellings, classes, by_spelling, hash }
    }

    pub fn len(&self) -> usize {
        self.spellings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spellings.is_empty()
    }

    /// Stable fingerprint of the token table, recorded in every persisted artifact.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn spelling(&self, id: TokenId) -> &'static str {
        self.spellings[id.index()]
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.classes[id.index()]
    }

    pub fn is_code(&self, id: TokenId) -> bool {
        self.class(id).is_code() && id != PAD
    }

    pub fn lookup(&self, spelling: &str) -> Option<TokenId> {
        self.by_spelling.get(spelling).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as u16).map(TokenId)
    }

    pub fn is_valid(&self, id: TokenId) -> bool {
        id.index() < self.len()
    }
}

pub fn digit(value: u8) -> TokenId {
    assert!(value < 10, "digit out of range");
    TokenId(FIRST_DIGIT + value as u16)
}

pub fn digit_value(id: TokenId) -> Option<i64> {
    (FIRST_DIGIT..FIRST_DIGIT + 10)
        .contains(&id.0)
        .then(|| (id.0 - FIRST_DIGIT) as i64)
}

/// The eight-entry identifier pool, in vocabulary order.
pub fn identifiers() -> [TokenId; 8] {
    std::array::from_fn(|i| TokenId(FIRST_IDENT + i as u16))
}

pub fn is_identifier(id: TokenId) -> bool {
    (FIRST_IDENT..FIRST_IDENT + 8).contains(&id.0)
}

pub fn comment_words() -> [TokenId; 8] {
    std::array::from_fn(|i| TokenId(FIRST_COMMENT + i as u16))
}

pub fn ident(name: &str) -> TokenId {
    let id = Vocabulary::standard()
        .lookup(name)
        .unwrap_or_else(|| panic!("unknown identifier {name:?}"));
    assert!(is_identifier(id), "{name:?} is not an identifier");
    id
}

/// Sequence-level code mask: vocabulary class, minus PAD, minus everything from a
/// `#` up to (not including) the next NEWLINE.
pub fn code_mask(ids: &[TokenId]) -> Vec<bool> {
    let vocab = Vocabulary::standard();
    let mut in_comment = false;
    ids.iter()
        .map(|&id| {
            if id == NEWLINE || id == END {
                in_comment = false;
            } else if id == HASH {
                in_comment = true;
            }
            !in_comment && vocab.is_code(id)
        })
        .collect()
}
