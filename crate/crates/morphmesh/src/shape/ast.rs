//! Expression tree for scalar surface functions of `x`, `y`, and `t`.
//!
//! Construction goes through the smart constructors (`add`, `mul`, ...)
//! which apply light, semantics-preserving simplification: constant folding
//! of total operations, dropping additive zeros and multiplicative ones,
//! and collapsing multiplication by zero. Division and square roots are
//! never folded when they could turn a runtime error into a silent value.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    T,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::T => "t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    /// Sign function with `sign(0) = 0`. Produced by differentiation of
    /// `abs` (its subgradient); also accepted by the parser so printed
    /// derivatives round-trip.
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// A surface expression. Structural equality (`PartialEq`) is what the
/// print/parse round-trip guarantee is stated against.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeExpr {
    Const(f64),
    Var(Var),
    Unary(UnaryFn, Box<ShapeExpr>),
    Binary(BinOp, Box<ShapeExpr>, Box<ShapeExpr>),
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("square root of negative value {0}")]
    SqrtNegative(f64),
    #[error("division by zero")]
    DivisionByZero,
}

impl ShapeExpr {
    pub fn constant(c: f64) -> Self {
        ShapeExpr::Const(c)
    }

    pub fn var(v: Var) -> Self {
        ShapeExpr::Var(v)
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            ShapeExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn add(a: ShapeExpr, b: ShapeExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ShapeExpr::Const(x + y),
            (Some(x), None) if x == 0.0 => b,
            (None, Some(y)) if y == 0.0 => a,
            _ => ShapeExpr::Binary(BinOp::Add, Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: ShapeExpr, b: ShapeExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ShapeExpr::Const(x - y),
            (None, Some(y)) if y == 0.0 => a,
            (Some(x), None) if x == 0.0 => Self::neg(b),
            _ => ShapeExpr::Binary(BinOp::Sub, Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: ShapeExpr, b: ShapeExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ShapeExpr::Const(x * y),
            (Some(x), None) => {
                if x == 0.0 {
                    ShapeExpr::Const(0.0)
                } else if x == 1.0 {
                    b
                } else {
                    ShapeExpr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
                }
            }
            (None, Some(y)) => {
                if y == 0.0 {
                    ShapeExpr::Const(0.0)
                } else if y == 1.0 {
                    a
                } else {
                    ShapeExpr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
                }
            }
            _ => ShapeExpr::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: ShapeExpr, b: ShapeExpr) -> Self {
        // Only the exactly-safe folds: constant/constant with nonzero
        // denominator, and unit denominator.
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => ShapeExpr::Const(x / y),
            (None, Some(y)) if y == 1.0 => a,
            _ => ShapeExpr::Binary(BinOp::Div, Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(a: ShapeExpr, b: ShapeExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ShapeExpr::Const(x.powf(y)),
            (None, Some(y)) if y == 1.0 => a,
            (None, Some(y)) if y == 0.0 => ShapeExpr::Const(1.0),
            _ => ShapeExpr::Binary(BinOp::Pow, Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: ShapeExpr) -> Self {
        match a {
            ShapeExpr::Const(c) => ShapeExpr::Const(-c),
            ShapeExpr::Unary(UnaryFn::Neg, inner) => *inner,
            _ => ShapeExpr::Unary(UnaryFn::Neg, Box::new(a)),
        }
    }

    pub fn apply(f: UnaryFn, a: ShapeExpr) -> Self {
        if f == UnaryFn::Neg {
            return Self::neg(a);
        }
        // Fold constants only where the operation is total.
        if let Some(c) = a.as_const() {
            match f {
                UnaryFn::Sin => return ShapeExpr::Const(c.sin()),
                UnaryFn::Cos => return ShapeExpr::Const(c.cos()),
                UnaryFn::Exp => return ShapeExpr::Const(c.exp()),
                UnaryFn::Abs => return ShapeExpr::Const(c.abs()),
                UnaryFn::Sign => return ShapeExpr::Const(sign0(c)),
                UnaryFn::Sqrt | UnaryFn::Neg => {}
            }
        }
        ShapeExpr::Unary(f, Box::new(a))
    }

    /// Evaluates at `(x, y, t)`.
    ///
    /// `pow` follows IEEE `powf` semantics (so e.g. a negative base with a
    /// fractional exponent yields NaN rather than an error); the two
    /// contract errors are square roots of negative values and division by
    /// zero.
    pub fn eval(&self, x: f64, y: f64, t: f64) -> Result<f64, EvalError> {
        match self {
            ShapeExpr::Const(c) => Ok(*c),
            ShapeExpr::Var(Var::X) => Ok(x),
            ShapeExpr::Var(Var::Y) => Ok(y),
            ShapeExpr::Var(Var::T) => Ok(t),
            ShapeExpr::Unary(f, a) => {
                let v = a.eval(x, y, t)?;
                Ok(match f {
                    UnaryFn::Neg => -v,
                    UnaryFn::Sin => v.sin(),
                    UnaryFn::Cos => v.cos(),
                    UnaryFn::Exp => v.exp(),
                    UnaryFn::Abs => v.abs(),
                    UnaryFn::Sign => sign0(v),
                    UnaryFn::Sqrt => {
                        if v < 0.0 {
                            return Err(EvalError::SqrtNegative(v));
                        }
                        v.sqrt()
                    }
                })
            }
            ShapeExpr::Binary(op, a, b) => {
                let va = a.eval(x, y, t)?;
                let vb = b.eval(x, y, t)?;
                Ok(match op {
                    BinOp::Add => va + vb,
                    BinOp::Sub => va - vb,
                    BinOp::Mul => va * vb,
                    BinOp::Div => {
                        if vb == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        va / vb
                    }
                    BinOp::Pow => va.powf(vb),
                })
            }
        }
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// Printing: minimal parentheses, chosen so that parsing the output yields a
// structurally identical tree. Precedence levels mirror the parser:
// additive (0), multiplicative (1), unary minus (2), power (3), atoms (4).
fn prec(e: &ShapeExpr) -> u8 {
    match e {
        ShapeExpr::Binary(BinOp::Add | BinOp::Sub, ..) => 0,
        ShapeExpr::Binary(BinOp::Mul | BinOp::Div, ..) => 1,
        ShapeExpr::Unary(UnaryFn::Neg, _) => 2,
        ShapeExpr::Binary(BinOp::Pow, ..) => 3,
        ShapeExpr::Const(c) if *c < 0.0 => 2, // prints with a leading minus
        _ => 4,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &ShapeExpr, min_prec: u8) -> fmt::Result {
    if prec(e) < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for ShapeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeExpr::Const(c) => write!(f, "{c}"),
            ShapeExpr::Var(v) => write!(f, "{}", v.name()),
            ShapeExpr::Unary(UnaryFn::Neg, a) => {
                write!(f, "-")?;
                write_child(f, a, 2)
            }
            ShapeExpr::Unary(func, a) => {
                let name = match func {
                    UnaryFn::Sin => "sin",
                    UnaryFn::Cos => "cos",
                    UnaryFn::Exp => "exp",
                    UnaryFn::Sqrt => "sqrt",
                    UnaryFn::Abs => "abs",
                    UnaryFn::Sign => "sign",
                    UnaryFn::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            ShapeExpr::Binary(op, a, b) => match op {
                // Left-associative: the right child needs parens at equal
                // precedence.
                BinOp::Add => {
                    write_child(f, a, 0)?;
                    write!(f, " + ")?;
                    write_child(f, b, 1)
                }
                BinOp::Sub => {
                    write_child(f, a, 0)?;
                    write!(f, " - ")?;
                    write_child(f, b, 1)
                }
                BinOp::Mul => {
                    write_child(f, a, 1)?;
                    write!(f, "*")?;
                    write_child(f, b, 2)
                }
                BinOp::Div => {
                    write_child(f, a, 1)?;
                    write!(f, "/")?;
                    write_child(f, b, 2)
                }
                // Right-associative; left child must be an atom-level term
                // (unary minus on the left would parse as -(a^b)).
                BinOp::Pow => {
                    write_child(f, a, 4)?;
                    write!(f, "^")?;
                    write_child(f, b, 2)
                }
            },
        }
    }
}
