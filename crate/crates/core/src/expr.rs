//! Pointwise expression trees.
//!
//! The operator set is closed on purpose: the fusion passes reason about
//! expression shapes (notably the exp-of-difference pattern), which an open
//! set of callbacks would make impossible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subtraction with the masked-row convention: `-inf - -inf = 0`, so that
/// `exp(x - m)` over an all-masked row yields 1 per element and the softmax
/// row comes out uniform instead of NaN.
#[inline]
pub fn sub_guarded(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        0.0
    } else {
        a - b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PointwiseExpr {
    /// Reference to the node's i-th input tensor.
    Arg(usize),
    Const(f64),
    Add(Box<PointwiseExpr>, Box<PointwiseExpr>),
    Sub(Box<PointwiseExpr>, Box<PointwiseExpr>),
    Mul(Box<PointwiseExpr>, Box<PointwiseExpr>),
    Div(Box<PointwiseExpr>, Box<PointwiseExpr>),
    Neg(Box<PointwiseExpr>),
    Exp(Box<PointwiseExpr>),
    Max2(Box<PointwiseExpr>, Box<PointwiseExpr>),
    Min2(Box<PointwiseExpr>, Box<PointwiseExpr>),
    /// where(mask, a, b): `a` where mask is nonzero, else `b`.
    Where(Box<PointwiseExpr>, Box<PointwiseExpr>, Box<PointwiseExpr>),
    Scale(f64, Box<PointwiseExpr>),
}

impl PointwiseExpr {
    pub fn arg(i: usize) -> Self {
        PointwiseExpr::Arg(i)
    }

    /// Number of distinct argument slots referenced (max index + 1).
    pub fn arity(&self) -> usize {
        let mut max = None;
        self.visit_args(&mut |i| max = Some(max.map_or(i, |m: usize| m.max(i))));
        max.map_or(0, |m| m + 1)
    }

    pub fn visit_args(&self, f: &mut impl FnMut(usize)) {
        match self {
            PointwiseExpr::Arg(i) => f(*i),
            PointwiseExpr::Const(_) => {}
            PointwiseExpr::Add(a, b)
            | PointwiseExpr::Sub(a, b)
            | PointwiseExpr::Mul(a, b)
            | PointwiseExpr::Div(a, b)
            | PointwiseExpr::Max2(a, b)
            | PointwiseExpr::Min2(a, b) => {
                a.visit_args(f);
                b.visit_args(f);
            }
            PointwiseExpr::Neg(a) | PointwiseExpr::Exp(a) | PointwiseExpr::Scale(_, a) => {
                a.visit_args(f)
            }
            PointwiseExpr::Where(c, a, b) => {
                c.visit_args(f);
                a.visit_args(f);
                b.visit_args(f);
            }
        }
    }

    /// Evaluate at a single point.
    pub fn eval_scalar(&self, args: &[f64]) -> Result<f64> {
        Ok(match self {
            PointwiseExpr::Arg(i) => args[*i],
            PointwiseExpr::Const(c) => *c,
            PointwiseExpr::Add(a, b) => a.eval_scalar(args)? + b.eval_scalar(args)?,
            PointwiseExpr::Sub(a, b) => sub_guarded(a.eval_scalar(args)?, b.eval_scalar(args)?),
            PointwiseExpr::Mul(a, b) => a.eval_scalar(args)? * b.eval_scalar(args)?,
            PointwiseExpr::Div(a, b) => {
                let d = b.eval_scalar(args)?;
                if d == 0.0 {
                    return Err(Error::DivByZero(String::new()));
                }
                a.eval_scalar(args)? / d
            }
            PointwiseExpr::Neg(a) => -a.eval_scalar(args)?,
            PointwiseExpr::Exp(a) => a.eval_scalar(args)?.exp(),
            PointwiseExpr::Max2(a, b) => a.eval_scalar(args)?.max(b.eval_scalar(args)?),
            PointwiseExpr::Min2(a, b) => a.eval_scalar(args)?.min(b.eval_scalar(args)?),
            PointwiseExpr::Where(c, a, b) => {
                if c.eval_scalar(args)? != 0.0 {
                    a.eval_scalar(args)?
                } else {
                    b.eval_scalar(args)?
                }
            }
            PointwiseExpr::Scale(c, a) => c * a.eval_scalar(args)?,
        })
    }

    /// Evaluate over whole buffers (all arguments share the same layout).
    pub fn eval_vec(&self, args: &[&[f64]], len: usize) -> Result<Vec<f64>> {
        match self {
            PointwiseExpr::Arg(i) => Ok(args[*i].to_vec()),
            PointwiseExpr::Const(c) => Ok(vec![*c; len]),
            PointwiseExpr::Add(a, b) => binop(a, b, args, len, |x, y| x + y),
            PointwiseExpr::Sub(a, b) => binop(a, b, args, len, sub_guarded),
            PointwiseExpr::Mul(a, b) => binop(a, b, args, len, |x, y| x * y),
            PointwiseExpr::Div(a, b) => {
                let bv = b.eval_vec(args, len)?;
                if bv.iter().any(|&d| d == 0.0) {
                    return Err(Error::DivByZero(String::new()));
                }
                let mut av = a.eval_vec(args, len)?;
                for (x, y) in av.iter_mut().zip(&bv) {
                    *x /= *y;
                }
                Ok(av)
            }
            PointwiseExpr::Neg(a) => unop(a, args, len, |x| -x),
            PointwiseExpr::Exp(a) => unop(a, args, len, f64::exp),
            PointwiseExpr::Max2(a, b) => binop(a, b, args, len, f64::max),
            PointwiseExpr::Min2(a, b) => binop(a, b, args, len, f64::min),
            PointwiseExpr::Where(c, a, b) => {
                let cv = c.eval_vec(args, len)?;
                let av = a.eval_vec(args, len)?;
                let mut bv = b.eval_vec(args, len)?;
                for i in 0..len {
                    if cv[i] != 0.0 {
                        bv[i] = av[i];
                    }
                }
                Ok(bv)
            }
            PointwiseExpr::Scale(c, a) => {
                let c = *c;
                unop(a, args, len, move |x| c * x)
            }
        }
    }
}

fn binop(
    a: &PointwiseExpr,
    b: &PointwiseExpr,
    args: &[&[f64]],
    len: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let mut av = a.eval_vec(args, len)?;
    let bv = b.eval_vec(args, len)?;
    for (x, y) in av.iter_mut().zip(&bv) {
        *x = f(*x, *y);
    }
    Ok(av)
}

fn unop(
    a: &PointwiseExpr,
    args: &[&[f64]],
    len: usize,
    f: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let mut av = a.eval_vec(args, len)?;
    for x in av.iter_mut() {
        *x = f(*x);
    }
    Ok(av)
}

// convenience constructors used by the graph builders
pub fn add(a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Add(Box::new(a), Box::new(b))
}
pub fn sub(a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Sub(Box::new(a), Box::new(b))
}
pub fn mul(a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Mul(Box::new(a), Box::new(b))
}
pub fn div(a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Div(Box::new(a), Box::new(b))
}
pub fn neg(a: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Neg(Box::new(a))
}
pub fn exp(a: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Exp(Box::new(a))
}
pub fn max2(a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Max2(Box::new(a), Box::new(b))
}
pub fn min2(a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Min2(Box::new(a), Box::new(b))
}
pub fn where_(c: PointwiseExpr, a: PointwiseExpr, b: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Where(Box::new(c), Box::new(a), Box::new(b))
}
pub fn scale(c: f64, a: PointwiseExpr) -> PointwiseExpr {
    PointwiseExpr::Scale(c, Box::new(a))
}
pub fn constant(c: f64) -> PointwiseExpr {
    PointwiseExpr::Const(c)
}
