//! Nested list operations over single digits.
//!
//! Expressions are written `[MAX 1 [SM 4 9] 3]` and tokenized at symbol
//! level: each opener (`[MIN`, `[MAX`, `[MED`, `[SM`), the closing bracket and
//! each digit is one token.

use std::fmt;

use super::{TaskExample, Target};
use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Min,
    Max,
    /// Lower median of the sorted arguments.
    Med,
    /// Sum modulo 10.
    SumMod,
}

impl Op {
    const ALL: [Op; 4] = [Op::Min, Op::Max, Op::Med, Op::SumMod];

    pub fn name(self) -> &'static str {
        match self {
            Op::Min => "MIN",
            Op::Max => "MAX",
            Op::Med => "MED",
            Op::SumMod => "SM",
        }
    }

    fn token(self) -> u32 {
        match self {
            Op::Min => u32::from(b'<'),
            Op::Max => u32::from(b'>'),
            Op::Med => u32::from(b'~'),
            Op::SumMod => u32::from(b'+'),
        }
    }

    pub fn apply(self, args: &[u8]) -> u8 {
        match self {
            Op::Min => *args.iter().min().expect("non-empty"),
            Op::Max => *args.iter().max().expect("non-empty"),
            Op::Med => {
                let mut s = args.to_vec();
                s.sort_unstable();
                s[(s.len() - 1) / 2]
            }
            Op::SumMod => (args.iter().map(|&a| u32::from(a)).sum::<u32>() % 10) as u8,
        }
    }
}

pub const CLOSE: u32 = b']' as u32;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Digit(u8),
    Apply(Op, Vec<Expr>),
}

impl Expr {
    pub fn eval(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Apply(op, args) => op.apply(&args.iter().map(Expr::eval).collect::<Vec<_>>()),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Apply(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<u32>) {
        match self {
            Expr::Digit(d) => out.push(u32::from(b'0' + d)),
            Expr::Apply(op, args) => {
                out.push(op.token());
                args.iter().for_each(|a| a.push_tokens(out));
                out.push(CLOSE);
            }
        }
    }

    /// Number of symbol tokens.
    pub fn len(&self) -> usize {
        match self {
            Expr::Digit(_) => 1,
            Expr::Apply(_, args) => 2 + args.iter().map(Expr::len).sum::<usize>(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Digit(d) => write!(f, "{d}"),
            Expr::Apply(op, args) => {
                write!(f, "[{}", op.name())?;
                for a in args {
                    write!(f, " {a}")?;
                }
                write!(f, "]")
            }
        }
    }
}

/// Parses the bracketed text form.
pub fn parse_expr(text: &str) -> Result<Expr> {
    let spaced = text.replace('[', " [").replace(']', " ] ");
    let words: Vec<&str> = spaced.split_whitespace().collect();
    let mut pos = 0;
    let e = parse_at(&words, &mut pos)?;
    if pos != words.len() {
        return Err(Error::InvalidArgument(format!("trailing input after expression: {:?}", &words[pos..])));
    }
    Ok(e)
}

fn parse_at(words: &[&str], pos: &mut usize) -> Result<Expr> {
    let bad = |m: String| Error::InvalidArgument(m);
    let w = *words.get(*pos).ok_or_else(|| bad("unexpected end of expression".into()))?;
    *pos += 1;
    if let Some(name) = w.strip_prefix('[') {
        let op = Op::ALL.into_iter().find(|o| o.name() == name).ok_or_else(|| bad(format!("unknown operator {name:?}")))?;
        let mut args = Vec::new();
        while words.get(*pos) != Some(&"]") {
            args.push(parse_at(words, pos)?);
        }
        *pos += 1;
        if args.is_empty() {
            return Err(bad(format!("{name} without arguments")));
        }
        return Ok(Expr::Apply(op, args));
    }
    match w.parse::<u8>() {
        Ok(d) if d < 10 => Ok(Expr::Digit(d)),
        _ => Err(bad(format!("expected a digit, got {w:?}"))),
    }
}

const MAX_ARGS: usize = 5;
const NEST_PROB: f64 = 0.3;

fn gen_expr(rng: &mut Rng, depth_left: usize) -> Expr {
    let op = Op::ALL[rng.below(4)];
    let n = rng.range(2, MAX_ARGS);
    let args = (0..n)
        .map(|_| {
            if depth_left > 1 && rng.bernoulli(NEST_PROB) {
                gen_expr(rng, depth_left - 1)
            } else {
                Expr::Digit(rng.below(10) as u8)
            }
        })
        .collect();
    Expr::Apply(op, args)
}

/// Random expressions of depth at most `max_depth` whose token form, with
/// the leading classification token, fits in `max_len`.
pub fn gen_listops(rng: &mut Rng, max_depth: usize, max_len: usize, count: usize) -> Result<Vec<TaskExample>> {
    if max_depth == 0 {
        return Err(Error::InvalidArgument("ListOps needs max_depth >= 1".into()));
    }
    if max_len < 5 {
        return Err(Error::InvalidArgument(format!("ListOps needs max_len >= 5, got {max_len}")));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let e = gen_expr(rng, max_depth);
        if e.len() + 1 > max_len {
            continue;
        }
        let mut tokens = vec![vocab::CLS];
        tokens.extend(e.tokens());
        let n = tokens.len();
        out.push(TaskExample { tokens, pair: None, target: Target::Class(usize::from(e.eval())), natural_len: n });
    }
    Ok(out)
}

/// Rebuilds the expression from its token form (after the classification
/// token, padding ignored).
pub fn decode_tokens(tokens: &[u32]) -> Result<Expr> {
    let text: String = tokens
        .iter()
        .filter(|&&t| !vocab::is_special(t))
        .map(|&t| match t as u8 {
            b'<' => " [MIN".to_string(),
            b'>' => " [MAX".to_string(),
            b'~' => " [MED".to_string(),
            b'+' => " [SM".to_string(),
            b']' => " ]".to_string(),
            c => format!(" {}", c as char),
        })
        .collect();
    parse_expr(&text)
}
