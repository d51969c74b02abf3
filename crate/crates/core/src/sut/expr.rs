//! Arithmetic rules over input fields, e.g. `price * qty + in.fee`.
//!
//! Grammar: sums of products of unary terms; atoms are integer or float
//! literals, field names (an optional `in.` prefix is ignored) and
//! parenthesised expressions. Integer arithmetic is checked; mixing an
//! integer with a float promotes to float.

use crate::domain::{Fields, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("input field `{0}` is missing")]
    MissingField(String),
    #[error("input field `{0}` is not numeric")]
    NotNumeric(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64),
    Float(f64),
    Field(String),
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = p.sum()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Syntax {
            pos: self.pos,
            msg: msg.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => Op::Add,
                Some(b'-') => Op::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => Op::Mul,
                Some(b'/') => Op::Div,
                Some(b'%') => Op::Rem,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || matches!(self.src[self.pos], b'_' | b'.'))
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                let name = name.strip_prefix("in.").unwrap_or(name);
                if name.is_empty() || name.contains('.') {
                    return Err(self.err("bad field name"));
                }
                Ok(Expr::Field(name.to_owned()))
            }
            _ => Err(self.err("expected a number, field or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let mut is_float = false;
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            is_float = true;
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if is_float {
            text.parse().map(Expr::Float).map_err(|_| self.err("bad float"))
        } else {
            text.parse()
                .map(Expr::Int)
                .map_err(|_| self.err("integer literal out of range"))
        }
    }
}

#[derive(Clone, Copy)]
enum Num {
    I(i64),
    F(f64),
}

impl Num {
    fn as_f64(self) -> f64 {
        match self {
            Num::I(i) => i as f64,
            Num::F(f) => f,
        }
    }
}

impl Expr {
    /// Field names the expression reads.
    pub fn fields(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Field(f) => out.push(f),
            Expr::Neg(e) => e.collect_fields(out),
            Expr::Bin(_, a, b) => {
                a.collect_fields(out);
                b.collect_fields(out);
            }
            Expr::Int(_) | Expr::Float(_) => {}
        }
    }

    pub fn eval(&self, input: &Fields) -> Result<Value, ExprError> {
        Ok(match self.num(input)? {
            Num::I(i) => Value::Int(i),
            Num::F(f) => Value::Float(f),
        })
    }

    fn num(&self, input: &Fields) -> Result<Num, ExprError> {
        match self {
            Expr::Int(i) => Ok(Num::I(*i)),
            Expr::Float(f) => Ok(Num::F(*f)),
            Expr::Field(name) => match input.get(name) {
                Some(Value::Int(i)) => Ok(Num::I(*i)),
                Some(Value::Float(f)) => Ok(Num::F(*f)),
                Some(_) => Err(ExprError::NotNumeric(name.clone())),
                None => Err(ExprError::MissingField(name.clone())),
            },
            Expr::Neg(e) => match e.num(input)? {
                Num::I(i) => i.checked_neg().map(Num::I).ok_or(ExprError::Overflow),
                Num::F(f) => Ok(Num::F(-f)),
            },
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.num(input)?, b.num(input)?);
                match (a, b) {
                    (Num::I(x), Num::I(y)) => {
                        let r = match op {
                            Op::Add => x.checked_add(y),
                            Op::Sub => x.checked_sub(y),
                            Op::Mul => x.checked_mul(y),
                            Op::Div | Op::Rem if y == 0 => return Err(ExprError::DivisionByZero),
                            Op::Div => x.checked_div(y),
                            Op::Rem => x.checked_rem(y),
                        };
                        r.map(Num::I).ok_or(ExprError::Overflow)
                    }
                    _ => {
                        let (x, y) = (a.as_f64(), b.as_f64());
                        if matches!(op, Op::Div | Op::Rem) && y == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        Ok(Num::F(match op {
                            Op::Add => x + y,
                            Op::Sub => x - y,
                            Op::Mul => x * y,
                            Op::Div => x / y,
                            Op::Rem => x % y,
                        }))
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(pairs: &[(&str, Value)]) -> Fields {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn sums_fields() {
        let e = parse("in.x + in.y").unwrap();
        assert_eq!(
            e.eval(&input(&[("x", 2.into()), ("y", 3.into())])).unwrap(),
            Value::Int(5)
        );
    }

    #[test]
    fn precedence_and_parentheses() {
        let i = input(&[("a", 2.into()), ("b", 3.into())]);
        assert_eq!(parse("a + b * 4").unwrap().eval(&i).unwrap(), Value::Int(14));
        assert_eq!(parse("(a + b) * 4").unwrap().eval(&i).unwrap(), Value::Int(20));
        assert_eq!(parse("-a - -b").unwrap().eval(&i).unwrap(), Value::Int(1));
        assert_eq!(parse("7 % b").unwrap().eval(&i).unwrap(), Value::Int(1));
    }

    #[test]
    fn float_promotion() {
        let i = input(&[("price", 2.5.into()), ("qty", 4.into())]);
        assert_eq!(parse("price * qty").unwrap().eval(&i).unwrap(), Value::Float(10.0));
        assert_eq!(parse("1.5 + 1").unwrap().eval(&i).unwrap(), Value::Float(2.5));
    }

    #[test]
    fn errors() {
        assert!(matches!(parse("1 +"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("(1"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("1 2"), Err(ExprError::Syntax { .. })));
        let i = input(&[("s", "text".into()), ("z", 0.into())]);
        assert_eq!(parse("q").unwrap().eval(&i), Err(ExprError::MissingField("q".into())));
        assert_eq!(parse("s + 1").unwrap().eval(&i), Err(ExprError::NotNumeric("s".into())));
        assert_eq!(parse("1 / z").unwrap().eval(&i), Err(ExprError::DivisionByZero));
        assert_eq!(
            parse("9223372036854775807 + 1").unwrap().eval(&i),
            Err(ExprError::Overflow)
        );
    }

    #[test]
    fn lists_fields() {
        assert_eq!(parse("a * (b + in.c)").unwrap().fields(), vec!["a", "b", "c"]);
    }
}
