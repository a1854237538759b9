use std::fmt;

use thiserror::Error;

use super::vocab::{
    digit_value, is_identifier, TokenId, Vocabulary, ASSIGN, COLON, COMMA, ELSE, END, EQ_EQ,
    FN, FN_NAME, HASH, IF, LESS, LET, LPAREN, MINUS, NEWLINE, PAD, PERCENT, PLUS, RETURN, RPAREN,
    STAR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Rem,
    Less,
    Equal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Var(TokenId),
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Let { name: TokenId, value: Expr },
    Return(Expr),
    If { cond: Expr, then_branch: Box<Stmt>, else_branch: Box<Stmt> },
}

impl Stmt {
    fn always_returns(&self) -> bool {
        match self {
            Stmt::Let { .. } => false,
            Stmt::Return(_) => true,
            Stmt::If { then_branch, else_branch, .. } => {
                then_branch.always_returns() && else_branch.always_returns()
            }
        }
    }
}

/// A parsed single-function MiniLang program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub name: TokenId,
    pub params: Vec<TokenId>,
    pub body: Vec<Stmt>,
}

impl Program {
    pub fn arity(&self) -> usize {
        self.params.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    Unexpected { found: Option<TokenId>, expected: Vec<&'static str> },
    UnboundIdentifier(TokenId),
    DuplicateParameter(TokenId),
    MissingReturn,
}

/// Parse or scope failure at a token position (PAD tokens are not counted).
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vocab = Vocabulary::standard();
        let show = |t: TokenId| format!("{:?}", vocab.spelling(t));
        match &self.kind {
            ParseErrorKind::Unexpected { found, expected } => write!(
                f,
                "at token {}: found {}, expected one of {:?}",
                self.position,
                found.map_or_else(|| "end of input".to_string(), show),
                expected
            ),
            ParseErrorKind::UnboundIdentifier(id) => {
                write!(f, "at token {}: unbound identifier {}", self.position, show(*id))
            }
            ParseErrorKind::DuplicateParameter(id) => {
                write!(f, "at token {}: duplicate parameter {}", self.position, show(*id))
            }
            ParseErrorKind::MissingReturn => {
                write!(f, "at token {}: not every path returns", self.position)
            }
        }
    }
}

/// Parses `fn f ( params ) : NEWLINE body [END]`, with scope and return-path checks.
pub fn parse_program(ids: &[TokenId]) -> Result<Program, ParseError> {
    let toks: Vec<TokenId> = ids.iter().copied().filter(|&t| t != PAD).collect();
    Parser { toks: &toks, pos: 0, scope: Vec::new() }.program()
}

struct Parser<'a> {
    toks: &'a [TokenId],
    pos: usize,
    scope: Vec<TokenId>,
}

type PResult<T> = Result<T, ParseError>;

impl Parser<'_> {
    fn peek(&self) -> Option<TokenId> {
        self.toks.get(self.pos).copied()
    }

    fn error(&self, expected: &[&'static str]) -> ParseError {
        ParseError {
            position: self.pos,
            kind: ParseErrorKind::Unexpected { found: self.peek(), expected: expected.to_vec() },
        }
    }

    fn expect(&mut self, tok: TokenId, name: &'static str) -> PResult<()> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&[name]))
        }
    }

    fn eat(&mut self, tok: TokenId) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn program(mut self) -> PResult<Program> {
        self.expect(FN, "fn")?;
        let name = self.peek().filter(|&t| t == FN_NAME).ok_or_else(|| self.error(&["f"]))?;
        self.pos += 1;
        self.expect(LPAREN, "(")?;
        let mut params = Vec::new();
        if let Some(p) = self.peek().filter(|&t| is_identifier(t)) {
            self.pos += 1;
            params.push(p);
            if self.eat(COMMA) {
                let q = self.ident()?;
                if q == p {
                    return Err(ParseError {
                        position: self.pos - 1,
                        kind: ParseErrorKind::DuplicateParameter(q),
                    });
                }
                params.push(q);
            }
        }
        self.expect(RPAREN, ")")?;
        self.expect(COLON, ":")?;
        self.expect(NEWLINE, "NEWLINE")?;
        self.scope = params.clone();

        let mut body = Vec::new();
        loop {
            match self.peek() {
                None => break,
                Some(t) if t == END => {
                    self.pos += 1;
                    if self.peek().is_some() {
                        return Err(self.error(&["end of input"]));
                    }
                    break;
                }
                Some(t) if t == NEWLINE => self.pos += 1,
                Some(t) if t == HASH => self.comment()?,
                Some(_) => body.push(self.stmt()?),
            }
        }
        if !body.iter().any(Stmt::always_returns) {
            return Err(ParseError { position: self.pos, kind: ParseErrorKind::MissingReturn });
        }
        Ok(Program { name, params, body })
    }

    fn comment(&mut self) -> PResult<()> {
        self.expect(HASH, "#")?;
        while let Some(t) = self.peek() {
            if t == NEWLINE {
                self.pos += 1;
                return Ok(());
            }
            if t == END {
                break;
            }
            self.pos += 1;
        }
        Err(self.error(&["NEWLINE"]))
    }

    fn ident(&mut self) -> PResult<TokenId> {
        match self.peek() {
            Some(t) if is_identifier(t) => {
                self.pos += 1;
                Ok(t)
            }
            _ => Err(self.error(&["identifier"])),
        }
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        match self.peek() {
            Some(t) if t == LET => {
                self.pos += 1;
                let name = self.ident()?;
                self.expect(ASSIGN, "=")?;
                let value = self.expr()?;
                self.expect(NEWLINE, "NEWLINE")?;
                self.scope.push(name);
                Ok(Stmt::Let { name, value })
            }
            Some(t) if t == RETURN => {
                self.pos += 1;
                let value = self.expr()?;
                self.expect(NEWLINE, "NEWLINE")?;
                Ok(Stmt::Return(value))
            }
            Some(t) if t == IF => {
                self.pos += 1;
                let cond = self.expr()?;
                self.expect(COLON, ":")?;
                self.expect(NEWLINE, "NEWLINE")?;
                let then_branch = Box::new(self.branch()?);
                self.expect(ELSE, "else")?;
                self.expect(COLON, ":")?;
                self.expect(NEWLINE, "NEWLINE")?;
                let else_branch = Box::new(self.branch()?);
                Ok(Stmt::If { cond, then_branch, else_branch })
            }
            _ => Err(self.error(&["let", "return", "if", "#"])),
        }
    }

    /// A branch is exactly one statement; a `let` inside it is scoped to the branch.
    fn branch(&mut self) -> PResult<Stmt> {
        let saved = self.scope.len();
        let stmt = self.stmt()?;
        self.scope.truncate(saved);
        Ok(stmt)
    }

    fn expr(&mut self) -> PResult<Expr> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some(t) if t == LESS => BinOp::Less,
            Some(t) if t == EQ_EQ => BinOp::Equal,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.additive()?;
        Ok(Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) })
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(t) if t == PLUS => BinOp::Add,
                Some(t) if t == MINUS => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.atom()?;
        loop {
            let op = match self.peek() {
                Some(t) if t == STAR => BinOp::Mul,
                Some(t) if t == PERCENT => BinOp::Rem,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
    }

    fn atom(&mut self) -> PResult<Expr> {
        let Some(t) = self.peek() else {
            return Err(self.error(&["digit", "identifier", "("]));
        };
        if let Some(v) = digit_value(t) {
            self.pos += 1;
            return Ok(Expr::Int(v));
        }
        if is_identifier(t) {
            if !self.scope.contains(&t) {
                return Err(ParseError {
                    position: self.pos,
                    kind: ParseErrorKind::UnboundIdentifier(t),
                });
            }
            self.pos += 1;
            return Ok(Expr::Var(t));
        }
        if t == LPAREN {
            self.pos += 1;
            let inner = self.expr()?;
            self.expect(RPAREN, ")")?;
            return Ok(inner);
        }
        Err(self.error(&["digit", "identifier", "("]))
    }
}
