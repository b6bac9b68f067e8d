//! Recursive-descent parser for surface expressions.
//!
//! Grammar (EBNF; whitespace insignificant between tokens):
//!
//! ```text
//! expr     = term , { ( "+" | "-" ) , term } ;
//! term     = factor , { ( "*" | "/" ) , factor } ;
//! factor   = "-" , factor | power ;
//! power    = atom , [ "^" , factor ] ;
//! atom     = number | variable | function , "(" , expr , ")" | "(" , expr , ")" ;
//! variable = "x" | "y" | "t" ;
//! function = "sin" | "cos" | "exp" | "sqrt" | "abs" | "sign" ;
//! number   = digits , [ "." , [ digits ] ] , [ exponent ]
//!          | "." , digits , [ exponent ] ;
//! exponent = ( "e" | "E" ) , [ "+" | "-" ] , digits ;
//! ```
//!
//! Operator precedence, loosest to tightest: `+ -`, then `* /` (both
//! left-associative), then unary `-`, then `^` (right-associative). So
//! `-x^2` is `-(x^2)` and `x^-2` is legal.

use super::ast::{ShapeExpr, UnaryFn, Var};
use std::fmt;
use thiserror::Error;

/// Parse failure, locating the offending byte in the source string.
#[derive(Debug, Error, PartialEq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
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

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Plus => write!(f, "'+'"),
            Tok::Minus => write!(f, "'-'"),
            Tok::Star => write!(f, "'*'"),
            Tok::Slash => write!(f, "'/'"),
            Tok::Caret => write!(f, "'^'"),
            Tok::LParen => write!(f, "'('"),
            Tok::RParen => write!(f, "')'"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(usize, Tok)>, ParseError> {
        let mut lx = Lexer {
            src: src.as_bytes(),
            pos: 0,
        };
        let mut out = Vec::new();
        loop {
            lx.skip_ws();
            if lx.pos >= lx.src.len() {
                return Ok(out);
            }
            let start = lx.pos;
            let c = lx.src[lx.pos];
            let tok = match c {
                b'+' => {
                    lx.pos += 1;
                    Tok::Plus
                }
                b'-' => {
                    lx.pos += 1;
                    Tok::Minus
                }
                b'*' => {
                    lx.pos += 1;
                    Tok::Star
                }
                b'/' => {
                    lx.pos += 1;
                    Tok::Slash
                }
                b'^' => {
                    lx.pos += 1;
                    Tok::Caret
                }
                b'(' => {
                    lx.pos += 1;
                    Tok::LParen
                }
                b')' => {
                    lx.pos += 1;
                    Tok::RParen
                }
                b'0'..=b'9' | b'.' => lx.number(start)?,
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    while lx.pos < lx.src.len()
                        && (lx.src[lx.pos].is_ascii_alphanumeric() || lx.src[lx.pos] == b'_')
                    {
                        lx.pos += 1;
                    }
                    Tok::Ident(String::from_utf8_lossy(&lx.src[start..lx.pos]).into_owned())
                }
                other => {
                    return Err(ParseError {
                        offset: start,
                        message: format!("unexpected character '{}'", other as char),
                    })
                }
            };
            out.push((start, tok));
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn number(&mut self, start: usize) -> Result<Tok, ParseError> {
        let mut saw_digit = false;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
            saw_digit = true;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
                saw_digit = true;
            }
        }
        if !saw_digit {
            return Err(ParseError {
                offset: start,
                message: "expected digits in number".into(),
            });
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            let mut exp_digits = false;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
                exp_digits = true;
            }
            if !exp_digits {
                // Not an exponent after all (e.g. "2e" would be "2" then
                // identifier "e", which the parser rejects as unknown).
                self.pos = mark;
            }
        }
        let slice = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii number slice");
        // f64's parser wants a leading digit; ".5" is in our grammar.
        let owned;
        let text = if slice.starts_with('.') {
            owned = format!("0{slice}");
            &owned
        } else {
            slice
        };
        text.parse::<f64>()
            .map(Tok::Num)
            .map_err(|_| ParseError {
                offset: start,
                message: format!("invalid number literal '{slice}'"),
            })
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    cursor: usize,
    end: usize,
}

/// Parses a surface expression over variables `x`, `y`, `t`.
pub fn parse_expr(src: &str) -> Result<ShapeExpr, ParseError> {
    let toks = Lexer::tokens(src)?;
    let mut p = Parser {
        toks,
        cursor: 0,
        end: src.len(),
    };
    let e = p.expr()?;
    if let Some((off, tok)) = p.peek_full() {
        return Err(ParseError {
            offset: off,
            message: format!("unexpected {tok} after expression"),
        });
    }
    Ok(e)
}

impl Parser {
    fn peek_full(&self) -> Option<(usize, Tok)> {
        self.toks.get(self.cursor).cloned()
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.cursor).map(|(_, t)| t)
    }

    fn advance(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.cursor).cloned();
        if t.is_some() {
            self.cursor += 1;
        }
        t
    }

    fn unexpected_end<T>(&self, expected: &str) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.end,
            message: format!("unexpected end of input, expected {expected}"),
        })
    }

    fn expr(&mut self) -> Result<ShapeExpr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.advance();
                    acc = ShapeExpr::add(acc, self.term()?);
                }
                Some(Tok::Minus) => {
                    self.advance();
                    acc = ShapeExpr::sub(acc, self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<ShapeExpr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.advance();
                    acc = ShapeExpr::mul(acc, self.factor()?);
                }
                Some(Tok::Slash) => {
                    self.advance();
                    acc = ShapeExpr::div(acc, self.factor()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<ShapeExpr, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.advance();
            return Ok(ShapeExpr::neg(self.factor()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ShapeExpr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.advance();
            // Right-associative, and the exponent may carry a unary minus.
            let exponent = self.factor()?;
            return Ok(ShapeExpr::pow(base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ShapeExpr, ParseError> {
        let Some((offset, tok)) = self.advance() else {
            return self.unexpected_end("a value");
        };
        match tok {
            Tok::Num(v) => Ok(ShapeExpr::constant(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "x" => Ok(ShapeExpr::var(Var::X)),
                "y" => Ok(ShapeExpr::var(Var::Y)),
                "t" => Ok(ShapeExpr::var(Var::T)),
                "sin" | "cos" | "exp" | "sqrt" | "abs" | "sign" => {
                    let f = match name.as_str() {
                        "sin" => UnaryFn::Sin,
                        "cos" => UnaryFn::Cos,
                        "exp" => UnaryFn::Exp,
                        "sqrt" => UnaryFn::Sqrt,
                        "abs" => UnaryFn::Abs,
                        _ => UnaryFn::Sign,
                    };
                    match self.advance() {
                        Some((_, Tok::LParen)) => {}
                        Some((off, other)) => {
                            return Err(ParseError {
                                offset: off,
                                message: format!(
                                    "function '{name}' requires parentheses, found {other}"
                                ),
                            })
                        }
                        None => return self.unexpected_end("'('"),
                    }
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    Ok(ShapeExpr::apply(f, arg))
                }
                _ => Err(ParseError {
                    offset,
                    message: format!(
                        "unknown identifier '{name}' (variables: x, y, t; functions: sin, cos, exp, sqrt, abs, sign)"
                    ),
                }),
            },
            other => Err(ParseError {
                offset,
                message: format!("unexpected {other}, expected a value"),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        match self.advance() {
            Some((_, Tok::RParen)) => Ok(()),
            Some((off, other)) => Err(ParseError {
                offset: off,
                message: format!("expected ')', found {other}"),
            }),
            None => self.unexpected_end("')'"),
        }
    }
}
