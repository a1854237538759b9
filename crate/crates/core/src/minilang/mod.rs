//! MiniLang: a one-function toy language whose execution supplies the
//! functional-correctness signal for watermarked completions.
//!
//! Source is whitespace-separated spellings with explicit line breaks:
//!
//! ```text
//! fn f ( a , b ) :
//! # adds value
//! return a + b
//! ```

pub mod interp;
pub mod lexer;
pub mod parser;
pub mod vocab;

pub use interp::{execute, run_tests, ExecKind, ExecOutcome, RuntimeError, TestCase, TestReport, TestSuite, DEFAULT_FUEL};
pub use lexer::{detokenize, tokenize, LexError, Origin, TokenSequence};
pub use parser::{parse_program, BinOp, Expr, ParseError, ParseErrorKind, Program, Stmt};
pub use vocab::{code_mask, TokenClass, TokenId, Vocabulary};
