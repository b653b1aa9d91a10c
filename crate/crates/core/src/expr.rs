//! Tiny expression language for scenario-defined dynamics and endpoint maps.
//!
//! Grammar: `+ - * / ^` with the usual precedence (`^` binds tightest and is
//! right-associative), unary minus, parentheses, numeric literals and the
//! functions `sin cos exp log sqrt abs`. Variables are whatever names the
//! caller compiles against (`t`, `x1..xn`, `u1..ur`, `z1..z2n`, scenario
//! parameters). No conditionals: dynamics are assumed smooth.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("undefined variable `{name}` at offset {offset}")]
    UndefinedVar { name: String, offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
        }
    }
}

/// Compiled expression; variables are indices into the table it was compiled
/// against.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Expr::Num(c) => *c,
            Expr::Var(i) => vars[*i],
            Expr::Neg(a) => -a.eval(vars),
            Expr::Add(a, b) => a.eval(vars) + b.eval(vars),
            Expr::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Expr::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Expr::Div(a, b) => a.eval(vars) / b.eval(vars),
            Expr::Pow(a, b) => {
                let base = a.eval(vars);
                let e = b.eval(vars);
                if e.fract() == 0.0 && e.abs() <= i32::MAX as f64 {
                    base.powi(e as i32)
                } else {
                    base.powf(e)
                }
            }
            Expr::Call(f, a) => f.apply(a.eval(vars)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // exponent part
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value = text.parse::<f64>().map_err(|_| ExprError::Parse {
                    offset: start,
                    message: format!("invalid number `{text}`"),
                })?;
                toks.push((Tok::Num(value), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                toks.push((Tok::Ident(src[start..i].to_string()), start));
            }
            other => {
                return Err(ExprError::Parse {
                    offset: i,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    lex: Lexer<'a>,
    pos: usize,
    vars: &'a [String],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.lex.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.lex.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn end_offset(&self) -> usize {
        self.lex.src.len()
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some((tok, _)) = self.peek() {
            match tok {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some((tok, _)) = self.peek() {
            match tok {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Some((Tok::Minus, _)) = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if let Some((Tok::Caret, _)) = self.peek() {
            self.bump();
            // right-associative, unary minus allowed in the exponent
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(Expr::Num(v)),
            Some((Tok::LParen, offset)) => {
                let inner = self.expr()?;
                match self.bump() {
                    Some((Tok::RParen, _)) => Ok(inner),
                    _ => Err(ExprError::Parse {
                        offset,
                        message: "unclosed parenthesis".into(),
                    }),
                }
            }
            Some((Tok::Ident(name), offset)) => {
                if let Some(func) = Func::from_name(&name) {
                    match self.bump() {
                        Some((Tok::LParen, lp)) => {
                            let arg = self.expr()?;
                            match self.bump() {
                                Some((Tok::RParen, _)) => Ok(Expr::Call(func, Box::new(arg))),
                                _ => Err(ExprError::Parse {
                                    offset: lp,
                                    message: "unclosed parenthesis".into(),
                                }),
                            }
                        }
                        _ => Err(ExprError::Parse {
                            offset,
                            message: format!("function `{name}` requires parentheses"),
                        }),
                    }
                } else if let Some(idx) = self.vars.iter().position(|v| v == &name) {
                    Ok(Expr::Var(idx))
                } else {
                    Err(ExprError::UndefinedVar { name, offset })
                }
            }
            Some((tok, offset)) => Err(ExprError::Parse {
                offset,
                message: format!("unexpected token `{tok:?}`"),
            }),
            None => Err(ExprError::Parse {
                offset: self.end_offset(),
                message: "unexpected end of expression".into(),
            }),
        }
    }
}

/// Parse `src` against the given variable table.
pub fn parse(src: &str, vars: &[String]) -> Result<Expr, ExprError> {
    let toks = lex(src)?;
    let mut parser = Parser {
        lex: Lexer { src, toks },
        pos: 0,
        vars,
    };
    let e = parser.expr()?;
    if let Some((tok, offset)) = parser.peek() {
        return Err(ExprError::Parse {
            offset: *offset,
            message: format!("trailing input `{tok:?}`"),
        });
    }
    Ok(e)
}

pub fn var_table(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vars2() -> Vec<String> {
        var_table(&["t", "x1", "x2", "u1"])
    }

    #[test]
    fn arithmetic_and_precedence() {
        let v = vars2();
        let e = parse("u1^2 - x1^2", &v).unwrap();
        assert_relative_eq!(e.eval(&[0.0, 0.3, 0.0, 0.2]), 0.04 - 0.09, epsilon = 1e-15);
        let e = parse("2*x1 + 3/x2 - -u1", &v).unwrap();
        assert_relative_eq!(e.eval(&[0.0, 1.0, 2.0, 4.0]), 2.0 + 1.5 + 4.0, epsilon = 1e-15);
        // ^ binds tighter than unary minus and is right-associative
        let e = parse("-x1^2", &v).unwrap();
        assert_relative_eq!(e.eval(&[0.0, 3.0, 0.0, 0.0]), -9.0, epsilon = 1e-15);
        let e = parse("2^3^2", &v).unwrap();
        assert_relative_eq!(e.eval(&[0.0; 4]), 512.0, epsilon = 1e-12);
        // integral powers of negative bases go through powi
        let e = parse("x1^2", &v).unwrap();
        assert_relative_eq!(e.eval(&[0.0, -0.6, 0.0, 0.0]), 0.36, epsilon = 1e-15);
    }

    #[test]
    fn functions_and_literals() {
        let v = vars2();
        let e = parse("sin(t) + exp(0) + 1.5e-3", &v).unwrap();
        assert_relative_eq!(
            e.eval(&[0.5, 0.0, 0.0, 0.0]),
            0.5f64.sin() + 1.0 + 1.5e-3,
            epsilon = 1e-15
        );
        let e = parse("sqrt(abs(x2))", &v).unwrap();
        assert_relative_eq!(e.eval(&[0.0, 0.0, -4.0, 0.0]), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn malformed_reports_offset() {
        let v = vars2();
        match parse("u1 +* x1", &v) {
            Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("u1 + (x1", &v) {
            Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("u1 +", &v) {
            Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn undefined_variable() {
        let v = vars2();
        match parse("u1 + x9", &v) {
            Err(ExprError::UndefinedVar { name, offset }) => {
                assert_eq!(name, "x9");
                assert_eq!(offset, 5);
            }
            other => panic!("expected undefined var, got {other:?}"),
        }
    }
}
