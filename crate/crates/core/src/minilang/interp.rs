use serde::{Deserialize, Serialize};

use super::parser::{parse_program, BinOp, Expr, ParseError, Program, Stmt};
use super::vocab::TokenId;

/// Default interpreter step budget.
pub const DEFAULT_FUEL: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeError {
    UnboundIdentifier,
    ModuloByZero,
    Overflow,
    ArityMismatch,
    NoReturn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecKind {
    Value(i64),
    ParseError(ParseError),
    RuntimeError(RuntimeError),
    FuelExhausted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecOutcome {
    pub kind: ExecKind,
    pub steps_used: u64,
}

impl ExecOutcome {
    pub fn value(&self) -> Option<i64> {
        match self.kind {
            ExecKind::Value(v) => Some(v),
            _ => None,
        }
    }
}

enum Halt {
    Runtime(RuntimeError),
    Fuel,
}

struct Machine {
    env: Vec<(TokenId, i64)>,
    steps: u64,
    fuel: u64,
}

impl Machine {
    fn tick(&mut self) -> Result<(), Halt> {
        if self.steps >= self.fuel {
            return Err(Halt::Fuel);
        }
        self.steps += 1;
        Ok(())
    }

    fn lookup(&self, name: TokenId) -> Result<i64, Halt> {
        self.env
            .iter()
            .rev()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or(Halt::Runtime(RuntimeError::UnboundIdentifier))
    }

    fn eval(&mut self, expr: &Expr) -> Result<i64, Halt> {
        self.tick()?;
        match expr {
            Expr::Int(v) => Ok(*v),
            Expr::Var(name) => self.lookup(*name),
            Expr::Binary { op, lhs, rhs } => {
                let l = self.eval(lhs)?;
                let r = self.eval(rhs)?;
                let overflow = Halt::Runtime(RuntimeError::Overflow);
                match op {
                    BinOp::Add => l.checked_add(r).ok_or(overflow),
                    BinOp::Sub => l.checked_sub(r).ok_or(overflow),
                    BinOp::Mul => l.checked_mul(r).ok_or(overflow),
                    BinOp::Rem if r == 0 => Err(Halt::Runtime(RuntimeError::ModuloByZero)),
                    BinOp::Rem => l.checked_rem(r).ok_or(overflow),
                    BinOp::Less => Ok((l < r) as i64),
                    BinOp::Equal => Ok((l == r) as i64),
                }
            }
        }
    }

    /// Returns `Some(value)` when the statement returned.
    fn exec(&mut self, stmt: &Stmt) -> Result<Option<i64>, Halt> {
        self.tick()?;
        match stmt {
            Stmt::Let { name, value } => {
                let v = self.eval(value)?;
                self.env.push((*name, v));
                Ok(None)
            }
            Stmt::Return(e) => self.eval(e).map(Some),
            Stmt::If { cond, then_branch, else_branch } => {
                let branch = if self.eval(cond)? != 0 { then_branch } else { else_branch };
                let depth = self.env.len();
                let out = self.exec(branch)?;
                self.env.truncate(depth);
                Ok(out)
            }
        }
    }
}

/// Runs `prog` on `args` with at most `fuel` steps. Never panics on bad input;
/// every failure is reported inside the outcome.
pub fn execute(prog: &Program, args: &[i64], fuel: u64) -> ExecOutcome {
    if args.len() != prog.arity() {
        return ExecOutcome { kind: ExecKind::RuntimeError(RuntimeError::ArityMismatch), steps_used: 0 };
    }
    let mut m = Machine {
        env: prog.params.iter().copied().zip(args.iter().copied()).collect(),
        steps: 0,
        fuel,
    };
    let mut result = Err(Halt::Runtime(RuntimeError::NoReturn));
    for stmt in &prog.body {
        match m.exec(stmt) {
            Ok(None) => continue,
            Ok(Some(v)) => {
                result = Ok(v);
                break;
            }
            Err(h) => {
                result = Err(h);
                break;
            }
        }
    }
    let kind = match result {
        Ok(v) => ExecKind::Value(v),
        Err(Halt::Runtime(e)) => ExecKind::RuntimeError(e),
        Err(Halt::Fuel) => ExecKind::FuelExhausted,
    };
    ExecOutcome { kind, steps_used: m.steps }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub args: Vec<i64>,
    pub expected: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestSuite {
    pub cases: Vec<TestCase>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestReport {
    pub passed: bool,
    pub cases: Vec<ExecOutcome>,
}

impl TestReport {
    pub fn parse_error(&self) -> Option<&ParseError> {
        self.cases.iter().find_map(|c| match &c.kind {
            ExecKind::ParseError(e) => Some(e),
            _ => None,
        })
    }
}

/// Parses `tokens` and runs every case. Unparseable input is a legal, failing input.
pub fn run_tests(tokens: &[TokenId], suite: &TestSuite, fuel: u64) -> TestReport {
    let prog = match parse_program(tokens) {
        Ok(p) => p,
        Err(e) => {
            let outcome = ExecOutcome { kind: ExecKind::ParseError(e), steps_used: 0 };
            return TestReport { passed: false, cases: vec![outcome] };
        }
    };
    let cases: Vec<ExecOutcome> =
        suite.cases.iter().map(|c| execute(&prog, &c.args, fuel)).collect();
    let passed = !suite.cases.is_empty()
        && suite.cases.iter().zip(&cases).all(|(c, o)| o.value() == Some(c.expected));
    TestReport { passed, cases }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::lexer::tokenize;

    fn program(src: &str) -> Program {
        parse_program(&tokenize(src).unwrap().ids).unwrap()
    }

    fn suite(cases: &[(&[i64], i64)]) -> TestSuite {
        TestSuite {
            cases: cases.iter().map(|(a, e)| TestCase { args: a.to_vec(), expected: *e }).collect(),
        }
    }

    #[test]
    fn identity() {
        let out = execute(&program("fn f ( a ) :\nreturn a\n"), &[7], DEFAULT_FUEL);
        assert_eq!(out.kind, ExecKind::Value(7));
    }

    #[test]
    fn modulo_by_zero() {
        let out = execute(&program("fn f ( a ) :\nreturn a % 0\n"), &[1], DEFAULT_FUEL);
        assert_eq!(out.kind, ExecKind::RuntimeError(RuntimeError::ModuloByZero));
    }

    #[test]
    fn fuel_exhaustion() {
        let p = program("fn f ( a ) :\nreturn ( ( ( a + 1 ) + 1 ) + 1 )\n");
        let out = execute(&p, &[0], 3);
        assert_eq!(out.kind, ExecKind::FuelExhausted);
        assert!(out.steps_used <= 3);
        assert_eq!(execute(&p, &[0], 100).kind, ExecKind::Value(3));
    }

    #[test]
    fn overflow_is_runtime_error() {
        let mut src = String::from("fn f ( a ) :\nlet x = a * 9\n");
        for _ in 0..25 {
            src.push_str("let x = x * 9\n");
        }
        src.push_str("return x\n");
        let out = execute(&program(&src), &[9], DEFAULT_FUEL);
        assert_eq!(out.kind, ExecKind::RuntimeError(RuntimeError::Overflow));
    }

    #[test]
    fn if_else_and_let_shadowing() {
        let p = program("fn f ( a , b ) :\nlet a = a + 0\nif a < b :\nreturn b\nelse :\nreturn a\n");
        assert_eq!(execute(&p, &[3, 5], 100).value(), Some(5));
        assert_eq!(execute(&p, &[-3, -5], 100).value(), Some(-3));
        assert_eq!(
            execute(&p, &[1], 100).kind,
            ExecKind::RuntimeError(RuntimeError::ArityMismatch)
        );
    }

    #[test]
    fn run_tests_pass_fail_and_parse_gate() {
        let add = tokenize("fn f ( a , b ) :\nreturn a + b\n").unwrap().ids;
        assert!(run_tests(&add, &suite(&[(&[2, 3], 5), (&[0, 0], 0)]), DEFAULT_FUEL).passed);
        assert!(!run_tests(&add, &suite(&[(&[2, 3], 6)]), DEFAULT_FUEL).passed);
        let broken = tokenize("fn f ( a , b ) :\nreturn a +\n").unwrap().ids;
        let report = run_tests(&broken, &suite(&[(&[2, 3], 5)]), DEFAULT_FUEL);
        assert!(!report.passed);
        assert!(report.parse_error().is_some());
    }

    #[test]
    fn fuel_monotonicity() {
        let p = program("fn f ( a , b ) :\nlet x = a * b + 2\nif x < 5 :\nreturn x % 3\nelse :\nreturn x - a\n");
        for args in [[1i64, 2], [4, -3], [9, 9]] {
            let full = execute(&p, &args, DEFAULT_FUEL);
            for fuel in full.steps_used..full.steps_used + 20 {
                assert_eq!(execute(&p, &args, fuel), full);
            }
            assert_eq!(execute(&p, &args, full.steps_used - 1).kind, ExecKind::FuelExhausted);
        }
    }
}
