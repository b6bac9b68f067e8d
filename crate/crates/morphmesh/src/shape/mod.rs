//! Time-varying surface fields `z = f(x, y, t)` defined by parsed
//! expressions, with exact symbolic gradients and unit normals.
//!
//! A [`ShapeField`] wraps one expression, or a piecewise sequence of them
//! guarded by time thresholds, together with an affine [`Transform`]:
//!
//! `F(x, y, t) = amplitude * f((x - x0)/sx, (y - y0)/sy, t) + offset`
//!
//! Gradients scale accordingly (`F_x = amplitude/sx * f_u`), and the upward
//! unit normal of the graph is `normalize(-F_x, -F_y, 1)`.
//!
//! Expression syntax is documented in [`parser`]: variables `x`, `y`, `t`,
//! operators `+ - * / ^` with conventional precedence, functions `sin`,
//! `cos`, `exp`, `sqrt`, `abs` (plus `sign`, which differentiation of `abs`
//! produces). Parsing reports byte offsets; evaluation reports square roots
//! of negative values and division by zero.

mod ast;
mod diff;
mod parser;

pub use ast::{BinOp, EvalError, ShapeExpr, UnaryFn, Var};
pub use diff::{differentiate, DiffError};
pub use parser::{parse_expr, ParseError};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("piecewise field needs at least one branch")]
    EmptyPiecewise,
    #[error("piecewise thresholds must be strictly increasing; saw {0} then {1}")]
    ThresholdOrder(f64, f64),
}

/// Affine reparameterization applied around a raw expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    /// Output scale (meters when the raw expression is dimensionless).
    pub amplitude: f64,
    /// Output shift, added last.
    pub offset: f64,
    /// Input shifts: the raw expression sees `(x - x0)/sx`.
    pub x0: f64,
    pub y0: f64,
    /// Input scales; must be nonzero.
    pub sx: f64,
    pub sy: f64,
}

impl Default for Transform {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            offset: 0.0,
            x0: 0.0,
            y0: 0.0,
            sx: 1.0,
            sy: 1.0,
        }
    }
}

/// One expression branch with its symbolic partials, active while
/// `t <= until` (the final branch has no bound).
#[derive(Debug, Clone)]
struct Segment {
    until: Option<f64>,
    f: ShapeExpr,
    fx: ShapeExpr,
    fy: ShapeExpr,
}

/// A surface field: piecewise-in-time expressions under a shared transform.
#[derive(Debug, Clone)]
pub struct ShapeField {
    segments: Vec<Segment>,
    pub transform: Transform,
}

impl ShapeField {
    /// Field from a single expression.
    pub fn new(expr: ShapeExpr, transform: Transform) -> Result<Self, ShapeError> {
        Self::piecewise(vec![(expr, None)], transform)
    }

    /// Convenience: parse a single-expression field from source text.
    pub fn from_source(src: &str, transform: Transform) -> Result<Self, ShapeError> {
        Self::new(parse_expr(src)?, transform)
    }

    /// Field switching between expressions at time thresholds. Each branch
    /// is `(expr, Some(t_max))` except the last, which must be
    /// `(expr, None)` and covers all later times. Branch `k` is active for
    /// `t <= t_max_k` (boundaries belong to the earlier branch), so the
    /// value changes exactly when `t` crosses a threshold.
    pub fn piecewise(
        branches: Vec<(ShapeExpr, Option<f64>)>,
        transform: Transform,
    ) -> Result<Self, ShapeError> {
        if branches.is_empty() {
            return Err(ShapeError::EmptyPiecewise);
        }
        let mut prev: Option<f64> = None;
        for (i, (_, until)) in branches.iter().enumerate() {
            match until {
                Some(u) => {
                    if let Some(p) = prev {
                        if *u <= p {
                            return Err(ShapeError::ThresholdOrder(p, *u));
                        }
                    }
                    prev = Some(*u);
                }
                None => {
                    debug_assert_eq!(i, branches.len() - 1);
                }
            }
        }
        let mut segments = Vec::with_capacity(branches.len());
        for (expr, until) in branches {
            let fx = differentiate(&expr, Var::X)?;
            let fy = differentiate(&expr, Var::Y)?;
            segments.push(Segment {
                until,
                f: expr,
                fx,
                fy,
            });
        }
        Ok(Self {
            segments,
            transform,
        })
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    /// Number of expression branches.
    pub fn branch_count(&self) -> usize {
        self.segments.len()
    }

    /// The branch thresholds (times at which the active expression changes).
    pub fn thresholds(&self) -> Vec<f64> {
        self.segments.iter().filter_map(|s| s.until).collect()
    }

    fn segment_for(&self, t: f64) -> &Segment {
        for seg in &self.segments {
            match seg.until {
                Some(u) if t <= u => return seg,
                None => return seg,
                _ => {}
            }
        }
        self.segments.last().expect("segments are nonempty")
    }

    fn raw_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.transform.x0) / self.transform.sx,
            (y - self.transform.y0) / self.transform.sy,
        )
    }

    /// Surface height at `(x, y, t)`.
    pub fn value(&self, x: f64, y: f64, t: f64) -> Result<f64, EvalError> {
        let (u, v) = self.raw_coords(x, y);
        let f = self.segment_for(t).f.eval(u, v, t)?;
        Ok(self.transform.amplitude * f + self.transform.offset)
    }

    /// Spatial gradient `(dF/dx, dF/dy)` at `(x, y, t)`.
    pub fn gradient(&self, x: f64, y: f64, t: f64) -> Result<(f64, f64), EvalError> {
        let (u, v) = self.raw_coords(x, y);
        let seg = self.segment_for(t);
        let fx = seg.fx.eval(u, v, t)?;
        let fy = seg.fy.eval(u, v, t)?;
        Ok((
            self.transform.amplitude / self.transform.sx * fx,
            self.transform.amplitude / self.transform.sy * fy,
        ))
    }

    /// Height and upward unit normal of the graph at `(x, y, t)`.
    pub fn sample(&self, x: f64, y: f64, t: f64) -> Result<(f64, Vector3<f64>), EvalError> {
        let z = self.value(x, y, t)?;
        let (fx, fy) = self.gradient(x, y, t)?;
        let n = Vector3::new(-fx, -fy, 1.0);
        Ok((z, n / n.norm()))
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 6] = [
    "paraboloid",
    "cylinder_x",
    "mesh3x3_target",
    "mesh8x8_target",
    "mesh20x20_target",
    "piecewise_4x8",
];

/// Bundled fields (identity transform; callers set their own):
///
/// - `paraboloid`: `x^2 + y^2`, the standard curved initial configuration.
/// - `cylinder_x`: `sqrt(1 - y^2)`, a unit cylinder with its axis along x.
/// - `mesh3x3_target`: `x*y*cos(y)`.
/// - `mesh8x8_target`: `cos(x + t) + cos(x + y + t)`, time-varying.
/// - `mesh20x20_target`: `x^2 - y^2`, a saddle.
/// - `piecewise_4x8`: `x^2 - y^2` until t=10, `x^2` until t=15, `y^2`
///   until t=25, then `-y^2`.
pub fn builtin(name: &str) -> Option<ShapeField> {
    let parsed = |src: &str| parse_expr(src).expect("builtin expressions parse");
    let field = match name {
        "paraboloid" => ShapeField::new(parsed("x^2 + y^2"), Transform::default()),
        "cylinder_x" => ShapeField::new(parsed("sqrt(1 - y^2)"), Transform::default()),
        "mesh3x3_target" => ShapeField::new(parsed("x*y*cos(y)"), Transform::default()),
        "mesh8x8_target" => {
            ShapeField::new(parsed("cos(x + t) + cos(x + y + t)"), Transform::default())
        }
        "mesh20x20_target" => ShapeField::new(parsed("x^2 - y^2"), Transform::default()),
        "piecewise_4x8" => ShapeField::piecewise(
            vec![
                (parsed("x^2 - y^2"), Some(10.0)),
                (parsed("x^2"), Some(15.0)),
                (parsed("y^2"), Some(25.0)),
                (parsed("-(y^2)"), None),
            ],
            Transform::default(),
        ),
        _ => return None,
    };
    Some(field.expect("builtin fields are well-formed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn print_parse_round_trip_on_builtins() {
        for name in BUILTIN_NAMES {
            let field = builtin(name).unwrap();
            for seg in &field.segments {
                for e in [&seg.f, &seg.fx, &seg.fy] {
                    let printed = e.to_string();
                    let reparsed = parse_expr(&printed)
                        .unwrap_or_else(|err| panic!("{name}: '{printed}': {err}"));
                    assert_eq!(&reparsed, e, "{name}: '{printed}'");
                }
            }
        }
    }

    #[test]
    fn transform_scales_values_and_gradients() {
        let t = Transform {
            amplitude: 2.0,
            offset: -0.01,
            x0: 0.05,
            y0: 0.05,
            sx: 0.1,
            sy: 0.2,
        };
        let f = ShapeField::from_source("x^2 + y^2", t).unwrap();
        // u = (0.15-0.05)/0.1 = 1, v = (0.25-0.05)/0.2 = 1 -> raw 2.
        let z = f.value(0.15, 0.25, 0.0).unwrap();
        assert!((z - (2.0 * 2.0 - 0.01)).abs() < 1e-15);
        let (gx, gy) = f.gradient(0.15, 0.25, 0.0).unwrap();
        assert!((gx - 2.0 / 0.1 * 2.0).abs() < 1e-12);
        assert!((gy - 2.0 / 0.2 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn normals_are_unit_and_upward() {
        let f = builtin("mesh3x3_target").unwrap();
        for (x, y) in [(0.0, 0.0), (1.0, 2.0), (-1.5, 0.7)] {
            let (_, n) = f.sample(x, y, 0.0).unwrap();
            assert!((n.norm() - 1.0).abs() < 1e-14);
            assert!(n.z > 0.0);
        }
        // At a critical point the normal is exactly +z.
        let flat = ShapeField::from_source("3", Transform::default()).unwrap();
        let (_, n) = flat.sample(0.4, -2.0, 1.0).unwrap();
        assert_eq!(n, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn piecewise_switches_exactly_at_thresholds() {
        let f = builtin("piecewise_4x8").unwrap();
        let probe = |t: f64| f.value(2.0, 3.0, t).unwrap();
        // Branch values at (x,y) = (2,3): x^2-y^2 = -5, x^2 = 4, y^2 = 9,
        // -y^2 = -9.
        assert_eq!(probe(0.0), -5.0);
        assert_eq!(probe(10.0), -5.0); // boundary belongs to earlier branch
        assert_eq!(probe(10.0 + 1e-12), 4.0);
        assert_eq!(probe(15.0), 4.0);
        assert_eq!(probe(15.0 + 1e-12), 9.0);
        assert_eq!(probe(25.0), 9.0);
        assert_eq!(probe(25.0 + 1e-12), -9.0);
        assert_eq!(probe(1e9), -9.0);
        assert_eq!(f.thresholds(), vec![10.0, 15.0, 25.0]);
    }

    #[test]
    fn piecewise_validation() {
        let e = || parse_expr("x").unwrap();
        assert!(matches!(
            ShapeField::piecewise(vec![], Transform::default()),
            Err(ShapeError::EmptyPiecewise)
        ));
        let err = ShapeField::piecewise(
            vec![(e(), Some(5.0)), (e(), Some(5.0)), (e(), None)],
            Transform::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ShapeError::ThresholdOrder(a, b) if a == 5.0 && b == 5.0));
    }

    #[test]
    fn eval_domain_errors() {
        let f = ShapeField::from_source("sqrt(x)", Transform::default()).unwrap();
        assert!(matches!(
            f.value(-1.0, 0.0, 0.0),
            Err(EvalError::SqrtNegative(_))
        ));
        let f = ShapeField::from_source("1/x", Transform::default()).unwrap();
        assert_eq!(f.value(0.0, 0.0, 0.0), Err(EvalError::DivisionByZero));
    }

    // Random expression trees built through the smart constructors, for the
    // print/parse round-trip property.
    fn arb_expr() -> impl Strategy<Value = ShapeExpr> {
        let leaf = prop_oneof![
            (-100.0f64..100.0).prop_map(ShapeExpr::constant),
            Just(ShapeExpr::var(Var::X)),
            Just(ShapeExpr::var(Var::Y)),
            Just(ShapeExpr::var(Var::T)),
        ];
        leaf.prop_recursive(5, 64, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| ShapeExpr::add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| ShapeExpr::sub(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| ShapeExpr::mul(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| ShapeExpr::div(a, b)),
                (inner.clone(), (-3.0f64..3.0))
                    .prop_map(|(a, c)| ShapeExpr::pow(a, ShapeExpr::constant(c))),
                inner.clone().prop_map(ShapeExpr::neg),
                (prop_oneof![
                    Just(UnaryFn::Sin),
                    Just(UnaryFn::Cos),
                    Just(UnaryFn::Exp),
                    Just(UnaryFn::Sqrt),
                    Just(UnaryFn::Abs),
                    Just(UnaryFn::Sign)
                ], inner)
                    .prop_map(|(f, a)| ShapeExpr::apply(f, a)),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            // Constant folding can produce non-finite literals (e.g. huge
            // exponents); the round-trip guarantee covers finite trees.
            fn finite(e: &ShapeExpr) -> bool {
                match e {
                    ShapeExpr::Const(c) => c.is_finite(),
                    ShapeExpr::Var(_) => true,
                    ShapeExpr::Unary(_, a) => finite(a),
                    ShapeExpr::Binary(_, a, b) => finite(a) && finite(b),
                }
            }
            prop_assume!(finite(&e));
            let printed = e.to_string();
            let reparsed = parse_expr(&printed).expect("printed expression parses");
            prop_assert_eq!(reparsed, e, "source: {}", printed);
        }
    }
}
