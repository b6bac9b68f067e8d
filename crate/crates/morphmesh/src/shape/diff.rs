//! Exact symbolic partial derivatives of surface expressions.
//!
//! Derivatives are assembled through the smart constructors, so the usual
//! identities (`u + 0 = u`, `1 * u = u`, `0 * u = 0`) are applied on the
//! fly and simple products differentiate to the expressions one would write
//! by hand: `d/dx (x*y*cos(y)) = y*cos(y)` structurally.
//!
//! `abs` differentiates to `sign(u) * u'`, with `sign(0) = 0` (the
//! subgradient at the kink). Powers with a non-constant exponent have no
//! exact derivative within this function set (that would require a
//! logarithm), so they are reported as an error instead of being silently
//! mis-differentiated.

use super::ast::{BinOp, ShapeExpr, UnaryFn, Var};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error(
        "cannot differentiate a power with a non-constant exponent; \
         rewrite with exp() if an exact derivative is needed"
    )]
    NonConstantExponent,
}

/// Partial derivative of `expr` with respect to `var`.
pub fn differentiate(expr: &ShapeExpr, var: Var) -> Result<ShapeExpr, DiffError> {
    use ShapeExpr as E;
    Ok(match expr {
        E::Const(_) => E::Const(0.0),
        E::Var(v) => E::Const(if *v == var { 1.0 } else { 0.0 }),
        E::Unary(f, a) => {
            let da = differentiate(a, var)?;
            let a = (**a).clone();
            match f {
                UnaryFn::Neg => E::neg(da),
                UnaryFn::Sin => E::mul(E::apply(UnaryFn::Cos, a), da),
                UnaryFn::Cos => E::neg(E::mul(E::apply(UnaryFn::Sin, a), da)),
                UnaryFn::Exp => E::mul(E::apply(UnaryFn::Exp, a), da),
                UnaryFn::Sqrt => E::div(
                    da,
                    E::mul(E::Const(2.0), E::apply(UnaryFn::Sqrt, a)),
                ),
                UnaryFn::Abs => E::mul(E::apply(UnaryFn::Sign, a), da),
                // Piecewise constant: zero wherever it is differentiable,
                // and 0 is the chosen subgradient at the jump.
                UnaryFn::Sign => E::Const(0.0),
            }
        }
        E::Binary(op, a, b) => {
            let (a, b) = ((**a).clone(), (**b).clone());
            match op {
                BinOp::Add => E::add(differentiate(&a, var)?, differentiate(&b, var)?),
                BinOp::Sub => E::sub(differentiate(&a, var)?, differentiate(&b, var)?),
                BinOp::Mul => {
                    let da = differentiate(&a, var)?;
                    let db = differentiate(&b, var)?;
                    E::add(E::mul(da, b.clone()), E::mul(a, db))
                }
                BinOp::Div => {
                    let da = differentiate(&a, var)?;
                    let db = differentiate(&b, var)?;
                    E::div(
                        E::sub(E::mul(da, b.clone()), E::mul(a, db)),
                        E::pow(b, E::Const(2.0)),
                    )
                }
                BinOp::Pow => {
                    let ShapeExpr::Const(c) = b else {
                        return Err(DiffError::NonConstantExponent);
                    };
                    let da = differentiate(&a, var)?;
                    E::mul(
                        E::mul(E::Const(c), E::pow(a, E::Const(c - 1.0))),
                        da,
                    )
                }
            }
        }
    })
}
