use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::minilang::{tokenize, TokenId};

/// Names available for `let` bindings; parameters are always `a` (and `b`).
const LET_NAMES: [&str; 6] = ["c", "x", "y", "z", "t", "u"];
const COMMENT_WORDS: [&str; 8] = ["note", "this", "adds", "value", "result", "temp", "fast", "todo"];

/// Surface-variant decisions. `Canonical` always takes the first option, which
/// yields the template's reference rendering.
///
/// Template text marks free-choice identifiers with a leading `@`; the marker is
/// stripped during rendering and the token position recorded.
pub enum Choices<'a> {
    Canonical { used: Vec<&'static str> },
    Random { rng: &'a mut ChaCha8Rng, used: Vec<&'static str> },
}

impl<'a> Choices<'a> {
    pub fn canonical() -> Self {
        Choices::Canonical { used: Vec::new() }
    }

    pub fn random(rng: &'a mut ChaCha8Rng) -> Self {
        Choices::Random { rng, used: Vec::new() }
    }

    fn flip(&mut self) -> bool {
        match self {
            Choices::Canonical { .. } => false,
            Choices::Random { rng, .. } => rng.random_bool(0.5),
        }
    }

    /// `l op r` with operands swapped at random (only valid for commutative `op`).
    pub fn commute(&mut self, l: &str, op: &str, r: &str) -> String {
        let (first, second) = if self.flip() { (r, l) } else { (l, r) };
        let mark = if first.starts_with(|c: char| c.is_ascii_lowercase()) { "@" } else { "" };
        format!("{mark}{first} {op} {second}")
    }

    /// A `let` name not yet used in this body.
    pub fn fresh(&mut self) -> &'static str {
        let (pick, used) = match self {
            Choices::Canonical { used } => {
                let name = *LET_NAMES.iter().find(|n| !used.contains(n)).expect("name pool");
                (name, used)
            }
            Choices::Random { rng, used } => {
                let free: Vec<&'static str> =
                    LET_NAMES.iter().copied().filter(|n| !used.contains(n)).collect();
                (*free.choose(rng).expect("name pool"), used)
            }
        };
        used.push(pick);
        pick
    }

    fn digit(&mut self) -> u32 {
        match self {
            Choices::Canonical { .. } => 0,
            Choices::Random { rng, .. } => rng.random_range(0..10),
        }
    }

    /// A comment line of two pool words.
    pub fn comment(&mut self) -> String {
        format!("# {} {}\n", self.word(), self.word())
    }

    fn word(&mut self) -> &'static str {
        match self {
            Choices::Canonical { .. } => COMMENT_WORDS[0],
            Choices::Random { rng, .. } => COMMENT_WORDS.choose(rng).expect("words"),
        }
    }
}

/// Tokens of a rendered body plus the positions that hold freely chosen identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub ids: Vec<TokenId>,
    pub choice_positions: Vec<usize>,
}

fn lex_marked(text: &str) -> Rendered {
    let mut choice_positions = Vec::new();
    let mut clean = String::with_capacity(text.len());
    let mut count = 0usize;
    for line in text.split_inclusive('\n') {
        for word in line.split_whitespace() {
            if let Some(rest) = word.strip_prefix('@') {
                choice_positions.push(count);
                clean.push_str(rest);
            } else {
                clean.push_str(word);
            }
            clean.push(' ');
            count += 1;
        }
        if line.ends_with('\n') {
            clean.push('\n');
            count += 1;
        }
    }
    let ids = tokenize(&clean).expect("template text").ids;
    debug_assert_eq!(ids.len(), count);
    Rendered { ids, choice_positions }
}

/// One semantic template: a function family with a fixed meaning and statement
/// structure, and many surface forms.
pub struct Template {
    pub id: &'static str,
    /// Two comment words that identify the template in the prompt.
    pub tag: [&'static str; 2],
    pub arity: usize,
    /// Dead `let` bindings (random name, random digit) opening the body.
    pub redundant_lets: usize,
    body: fn(&mut Choices) -> String,
}

impl Template {
    pub fn signature(&self) -> &'static str {
        match self.arity {
            0 => "fn f ( ) :",
            1 => "fn f ( a ) :",
            _ => "fn f ( a , b ) :",
        }
    }

    /// Prompt tokens: signature line, then the identifying comment line.
    pub fn prompt(&self) -> Vec<TokenId> {
        let text = format!("{}\n# {} {}\n", self.signature(), self.tag[0], self.tag[1]);
        tokenize(&text).expect("template prompt").ids
    }

    pub fn render_marked(&self, choices: &mut Choices) -> Rendered {
        let mut text = String::new();
        for _ in 0..self.redundant_lets {
            let name = choices.fresh();
            let value = choices.digit();
            text.push_str(&format!("let @{name} = {value}\n"));
        }
        text.push_str(&(self.body)(choices));
        lex_marked(&text)
    }

    /// Body tokens for one surface variant.
    pub fn render(&self, choices: &mut Choices) -> Vec<TokenId> {
        self.render_marked(choices).ids
    }

    /// The reference form: no dead bindings, first option at every choice.
    pub fn canonical(&self) -> Vec<TokenId> {
        lex_marked(&(self.body)(&mut Choices::canonical())).ids
    }
}

/// The set of templates tasks are drawn from.
pub struct TemplatePool {
    pub templates: Vec<Template>,
}

impl TemplatePool {
    pub fn standard() -> Self {
        Self { templates: standard_templates() }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }
}

fn t(
    id: &'static str,
    tag: [&'static str; 2],
    arity: usize,
    redundant_lets: usize,
    body: fn(&mut Choices) -> String,
) -> Template {
    Template { id, tag, arity, redundant_lets, body }
}

/// `if l < r` with the comparison written either way round; `then`/`other` are the
/// branch returns for `l < r` and its negation.
fn guarded(c: &mut Choices, then: &str, other: &str) -> String {
    if c.flip() {
        format!("if @b < a :\nreturn {other}\nelse :\nreturn {then}\n")
    } else {
        format!("if @a < b :\nreturn {then}\nelse :\nreturn {other}\n")
    }
}

fn standard_templates() -> Vec<Template> {
    vec![
        t("add", ["adds", "value"], 2, 0, |c| format!("return {}\n", c.commute("a", "+", "b"))),
        t("sub", ["this", "value"], 2, 1, |_| "return a - b\n".into()),
        t("scale", ["fast", "value"], 1, 0, |c| format!("return {}\n", c.commute("a", "*", "3"))),
        t("max", ["result", "fast"], 2, 0, |c| guarded(c, "b", "a")),
        t("min", ["result", "temp"], 2, 1, |c| guarded(c, "a", "b")),
        t("affine", ["adds", "temp"], 1, 0, |c| {
            let prod = c.commute("a", "*", "2");
            format!("return {prod} + 1\n")
        }),
        t("chain", ["note", "temp"], 2, 0, |c| {
            let x = c.fresh();
            let y = c.fresh();
            let sum = c.commute("a", "+", "b");
            let note = c.comment();
            format!("let @{x} = {sum}\n{note}let @{y} = {x} * 2\nreturn {y}\n")
        }),
        t("square", ["this", "result"], 1, 2, |_| "return a * a\n".into()),
        t("rem", ["note", "value"], 2, 0, |_| "return a % b\n".into()),
        t("absdiff", ["this", "fast"], 2, 0, |c| guarded(c, "b - a", "a - b")),
        t("equal", ["note", "fast"], 2, 1, |c| format!("return {}\n", c.commute("a", "==", "b"))),
        t("less", ["note", "result"], 2, 0, |_| "return a < b\n".into()),
        t("double_sum", ["adds", "fast"], 2, 0, |c| {
            let sum = c.commute("a", "+", "b");
            format!("return ( {sum} ) * 2\n")
        }),
        t("succ", ["adds", "result"], 1, 1, |c| format!("return {}\n", c.commute("a", "+", "1"))),
        t("relu", ["todo", "value"], 1, 0, |_| "if a < 0 :\nreturn 0\nelse :\nreturn a\n".into()),
        t("square_plus", ["todo", "temp"], 2, 0, |c| {
            let s = c.fresh();
            let note = c.comment();
            format!("let @{s} = a * a\n{note}return {}\n", c.commute(s, "+", "b"))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::{execute, parse_program, DEFAULT_FUEL};
    use rand::SeedableRng;

    fn program(t: &Template, body: &[TokenId]) -> crate::minilang::Program {
        let mut seq = t.prompt();
        seq.extend_from_slice(body);
        parse_program(&seq).unwrap_or_else(|e| panic!("{}: {e}", t.id))
    }

    #[test]
    fn pool_is_large_enough_and_tags_unique() {
        let pool = TemplatePool::standard();
        assert!(pool.len() >= 12);
        for (i, a) in pool.templates.iter().enumerate() {
            for b in &pool.templates[i + 1..] {
                assert_ne!(a.tag, b.tag);
                assert_ne!(a.id, b.id);
            }
        }
    }

    #[test]
    fn variants_agree_with_canonical_reference() {
        let pool = TemplatePool::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in &pool.templates {
            let reference = program(t, &t.canonical());
            for _ in 0..40 {
                let variant = program(t, &t.render(&mut Choices::random(&mut rng)));
                for _ in 0..100 {
                    let args: Vec<i64> = (0..t.arity).map(|_| rng.random_range(-9..=9)).collect();
                    let want = execute(&reference, &args, DEFAULT_FUEL);
                    let got = execute(&variant, &args, DEFAULT_FUEL);
                    assert_eq!(want.kind, got.kind, "{} on {args:?}", t.id);
                }
            }
        }
    }

    #[test]
    fn prompt_ends_with_newline_after_signature_colon() {
        use crate::minilang::vocab::{COLON, NEWLINE};
        for t in &TemplatePool::standard().templates {
            let p = t.prompt();
            assert_eq!(p.last(), Some(&NEWLINE));
            let colon = p.iter().position(|&x| x == COLON).unwrap();
            assert_eq!(p[colon + 1], NEWLINE);
        }
    }
}
