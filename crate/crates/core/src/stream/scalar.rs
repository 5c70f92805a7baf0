//! Scalars managed by the stream engine.
//!
//! A [`ManagedScalar`] keeps a host copy and a device copy of one `f64`.
//! Tasks write the device copy; the host copy is refreshed lazily when the
//! caller asks for the value. [`ManagedScalar::materialize`] is the blocking
//! read: it waits for pending writers, surfaces any recorded task failure,
//! and returns the value. Handles are cheap clones sharing the same slots.
//!
//! [`ScalarExpr`] builds small arithmetic trees over scalar handles and
//! literals with the usual operators; [`ScalarExpr::eval`] enqueues a single
//! task that reads the operands and writes a fresh result scalar, so whole
//! recurrences (step lengths, residual updates) can run on the device side
//! without a host round trip per operation.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::object::{next_object_id, ObjectId};
use crate::stream::{AccessMode, DeviceContext, StreamWorld};

struct Slots {
    host: f64,
    device: f64,
    host_valid: bool,
}

struct ScalarInner {
    id: ObjectId,
    world: Arc<StreamWorld>,
    slots: Mutex<Slots>,
}

#[derive(Clone)]
pub struct ManagedScalar {
    inner: Arc<ScalarInner>,
}

impl ManagedScalar {
    pub fn new(world: &Arc<StreamWorld>, value: f64) -> ManagedScalar {
        ManagedScalar {
            inner: Arc::new(ScalarInner {
                id: next_object_id(),
                world: Arc::clone(world),
                slots: Mutex::new(Slots { host: value, device: value, host_valid: true }),
            }),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.inner.id
    }

    pub fn world(&self) -> &Arc<StreamWorld> {
        &self.inner.world
    }

    /// Overwrites the value from the host side, waiting out pending tasks
    /// that touch this scalar.
    pub fn set(&self, value: f64) -> Result<()> {
        self.inner.world.wait_object_rw(self.inner.id)?;
        let mut slots = self.inner.slots.lock().unwrap();
        slots.host = value;
        slots.device = value;
        slots.host_valid = true;
        Ok(())
    }

    /// Blocking read: waits for pending writers, surfaces task failures, and
    /// refreshes the host copy from the device copy if it went stale.
    pub fn materialize(&self) -> Result<f64> {
        {
            let slots = self.inner.slots.lock().unwrap();
            if slots.host_valid {
                self.inner.world.check_error()?;
                return Ok(slots.host);
            }
        }
        self.inner.world.wait_object_read(self.inner.id)?;
        let mut slots = self.inner.slots.lock().unwrap();
        slots.host = slots.device;
        slots.host_valid = true;
        Ok(slots.host)
    }

    /// Marks the host copy stale; call before submitting a task that writes
    /// the device copy.
    pub(crate) fn begin_device_write(&self) {
        self.inner.slots.lock().unwrap().host_valid = false;
    }

    /// Device-side value, for use inside task bodies.
    pub(crate) fn device_value(&self) -> f64 {
        self.inner.slots.lock().unwrap().device
    }

    /// Device-side store, for use inside task bodies.
    pub(crate) fn set_device_value(&self, value: f64) {
        self.inner.slots.lock().unwrap().device = value;
    }

    /// Wraps the handle as an expression leaf.
    pub fn expr(&self) -> ScalarExpr {
        ScalarExpr::Value(self.clone())
    }
}

impl std::fmt::Debug for ManagedScalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let slots = self.inner.slots.lock().unwrap();
        f.debug_struct("ManagedScalar")
            .field("id", &self.inner.id)
            .field("device", &slots.device)
            .field("host_valid", &slots.host_valid)
            .finish()
    }
}

pub const MAX_EXPR_DEPTH: usize = 64;

/// Arithmetic tree over managed scalars and literals.
#[derive(Clone)]
pub enum ScalarExpr {
    Value(ManagedScalar),
    Lit(f64),
    Add(Box<ScalarExpr>, Box<ScalarExpr>),
    Sub(Box<ScalarExpr>, Box<ScalarExpr>),
    Mul(Box<ScalarExpr>, Box<ScalarExpr>),
    Div(Box<ScalarExpr>, Box<ScalarExpr>),
    Sqrt(Box<ScalarExpr>),
    Recip(Box<ScalarExpr>),
}

impl ScalarExpr {
    pub fn lit(v: f64) -> ScalarExpr {
        ScalarExpr::Lit(v)
    }

    pub fn sqrt(self) -> ScalarExpr {
        ScalarExpr::Sqrt(Box::new(self))
    }

    pub fn recip(self) -> ScalarExpr {
        ScalarExpr::Recip(Box::new(self))
    }

    fn depth(&self) -> usize {
        match self {
            ScalarExpr::Value(_) | ScalarExpr::Lit(_) => 1,
            ScalarExpr::Sqrt(a) | ScalarExpr::Recip(a) => 1 + a.depth(),
            ScalarExpr::Add(a, b)
            | ScalarExpr::Sub(a, b)
            | ScalarExpr::Mul(a, b)
            | ScalarExpr::Div(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    fn operands(&self, out: &mut Vec<ManagedScalar>) {
        match self {
            ScalarExpr::Value(s) => {
                if !out.iter().any(|o| o.id() == s.id()) {
                    out.push(s.clone());
                }
            }
            ScalarExpr::Lit(_) => {}
            ScalarExpr::Sqrt(a) | ScalarExpr::Recip(a) => a.operands(out),
            ScalarExpr::Add(a, b)
            | ScalarExpr::Sub(a, b)
            | ScalarExpr::Mul(a, b)
            | ScalarExpr::Div(a, b) => {
                a.operands(out);
                b.operands(out);
            }
        }
    }

    fn compute(&self) -> Result<f64> {
        Ok(match self {
            ScalarExpr::Value(s) => s.device_value(),
            ScalarExpr::Lit(v) => *v,
            ScalarExpr::Add(a, b) => a.compute()? + b.compute()?,
            ScalarExpr::Sub(a, b) => a.compute()? - b.compute()?,
            ScalarExpr::Mul(a, b) => a.compute()? * b.compute()?,
            ScalarExpr::Div(a, b) => {
                let d = b.compute()?;
                if d == 0.0 {
                    return Err(Error::ScalarMath("division by zero".into()));
                }
                a.compute()? / d
            }
            ScalarExpr::Sqrt(a) => {
                let v = a.compute()?;
                if v < 0.0 {
                    return Err(Error::ScalarMath(format!("sqrt of negative value {v:e}")));
                }
                v.sqrt()
            }
            ScalarExpr::Recip(a) => {
                let v = a.compute()?;
                if v == 0.0 {
                    return Err(Error::ScalarMath("reciprocal of zero".into()));
                }
                1.0 / v
            }
        })
    }

    /// Enqueues one task evaluating the tree; returns the result handle
    /// immediately. Errors inside the evaluation (division by zero, square
    /// root of a negative) surface at the next synchronization point.
    pub fn eval(self, ctx: &DeviceContext) -> Result<ManagedScalar> {
        let depth = self.depth();
        if depth > MAX_EXPR_DEPTH {
            return Err(Error::ExprTooDeep { depth, max: MAX_EXPR_DEPTH });
        }
        let mut operands = Vec::new();
        self.operands(&mut operands);
        for op in &operands {
            if !op.world().same_world(ctx.world()) {
                return Err(Error::WorldMismatch);
            }
        }
        let result = ManagedScalar::new(ctx.world(), 0.0);
        let mut accesses: Vec<(ObjectId, AccessMode)> =
            operands.iter().map(|o| (o.id(), AccessMode::Read)).collect();
        accesses.push((result.id(), AccessMode::Write));
        result.begin_device_write();
        let out = result.clone();
        ctx.submit(&accesses, move || {
            out.set_device_value(self.compute()?);
            Ok(())
        })?;
        Ok(result)
    }
}

impl From<&ManagedScalar> for ScalarExpr {
    fn from(s: &ManagedScalar) -> ScalarExpr {
        s.expr()
    }
}

impl From<f64> for ScalarExpr {
    fn from(v: f64) -> ScalarExpr {
        ScalarExpr::Lit(v)
    }
}

macro_rules! expr_binop {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl $trait for ScalarExpr {
            type Output = ScalarExpr;
            fn $method(self, rhs: ScalarExpr) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(self), Box::new(rhs))
            }
        }
        impl $trait<f64> for ScalarExpr {
            type Output = ScalarExpr;
            fn $method(self, rhs: f64) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(self), Box::new(ScalarExpr::Lit(rhs)))
            }
        }
        impl $trait<ScalarExpr> for f64 {
            type Output = ScalarExpr;
            fn $method(self, rhs: ScalarExpr) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(ScalarExpr::Lit(self)), Box::new(rhs))
            }
        }
        impl $trait<&ManagedScalar> for ScalarExpr {
            type Output = ScalarExpr;
            fn $method(self, rhs: &ManagedScalar) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(self), Box::new(rhs.expr()))
            }
        }
        impl $trait<ScalarExpr> for &ManagedScalar {
            type Output = ScalarExpr;
            fn $method(self, rhs: ScalarExpr) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(self.expr()), Box::new(rhs))
            }
        }
        impl $trait for &ManagedScalar {
            type Output = ScalarExpr;
            fn $method(self, rhs: &ManagedScalar) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(self.expr()), Box::new(rhs.expr()))
            }
        }
        impl $trait<f64> for &ManagedScalar {
            type Output = ScalarExpr;
            fn $method(self, rhs: f64) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(self.expr()), Box::new(ScalarExpr::Lit(rhs)))
            }
        }
        impl $trait<&ManagedScalar> for f64 {
            type Output = ScalarExpr;
            fn $method(self, rhs: &ManagedScalar) -> ScalarExpr {
                ScalarExpr::$variant(Box::new(ScalarExpr::Lit(self)), Box::new(rhs.expr()))
            }
        }
    };
}

expr_binop!(Add, add, Add);
expr_binop!(Sub, sub, Sub);
expr_binop!(Mul, mul, Mul);
expr_binop!(Div, div, Div);

impl Neg for ScalarExpr {
    type Output = ScalarExpr;
    fn neg(self) -> ScalarExpr {
        ScalarExpr::Sub(Box::new(ScalarExpr::Lit(0.0)), Box::new(self))
    }
}

impl Neg for &ManagedScalar {
    type Output = ScalarExpr;
    fn neg(self) -> ScalarExpr {
        -self.expr()
    }
}

/// Enqueues a guarded computation over materialized device values of
/// `inputs`, writing the outcome into a fresh scalar. The closure runs inside
/// the task; an error it returns is recorded as the world's task failure.
pub fn scalar_compute<F>(
    ctx: &DeviceContext,
    inputs: &[&ManagedScalar],
    f: F,
) -> Result<ManagedScalar>
where
    F: Fn(&[f64]) -> Result<f64> + Send + 'static,
{
    for s in inputs {
        if !s.world().same_world(ctx.world()) {
            return Err(Error::WorldMismatch);
        }
    }
    let result = ManagedScalar::new(ctx.world(), 0.0);
    let mut accesses: Vec<(ObjectId, AccessMode)> =
        inputs.iter().map(|s| (s.id(), AccessMode::Read)).collect();
    accesses.push((result.id(), AccessMode::Write));
    result.begin_device_write();
    let handles: Vec<ManagedScalar> = inputs.iter().map(|s| (*s).clone()).collect();
    let out = result.clone();
    ctx.submit(&accesses, move || {
        let vals: Vec<f64> = handles.iter().map(|h| h.device_value()).collect();
        out.set_device_value(f(&vals)?);
        Ok(())
    })?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::Communicator;
    use crate::stream::StreamConfig;

    fn world() -> Arc<StreamWorld> {
        StreamWorld::new(&Communicator::solo(), StreamConfig { workers: 2, jitter_seed: None })
    }

    #[test]
    fn materialize_returns_the_set_value_without_tasks() {
        let w = world();
        let s = ManagedScalar::new(&w, 2.5);
        assert_eq!(s.materialize().unwrap(), 2.5);
        s.set(-4.0).unwrap();
        assert_eq!(s.materialize().unwrap(), -4.0);
        w.shutdown().unwrap();
    }

    #[test]
    fn expressions_compute_on_the_device_side() {
        let w = world();
        let ctx = w.context();
        let a = ManagedScalar::new(&w, 3.0);
        let b = ManagedScalar::new(&w, 4.0);
        let hyp = ((&a * &a) + (&b * &b)).sqrt().eval(&ctx).unwrap();
        assert_eq!(hyp.materialize().unwrap(), 5.0);
        let ratio = ((&a + 1.0) / (&b - 2.0)).eval(&ctx).unwrap();
        assert_eq!(ratio.materialize().unwrap(), 2.0);
        let neg = (-&a).eval(&ctx).unwrap();
        assert_eq!(neg.materialize().unwrap(), -3.0);
        let r = (&b).expr().recip().eval(&ctx).unwrap();
        assert_eq!(r.materialize().unwrap(), 0.25);
        w.shutdown().unwrap();
    }

    #[test]
    fn chained_expressions_respect_data_dependencies() {
        let w = world();
        let ctx = w.context();
        let mut acc = ManagedScalar::new(&w, 1.0);
        for _ in 0..10 {
            acc = (&acc + &acc).eval(&ctx).unwrap();
        }
        assert_eq!(acc.materialize().unwrap(), 1024.0);
        w.shutdown().unwrap();
    }

    #[test]
    fn division_by_zero_surfaces_at_materialize() {
        let w = world();
        let ctx = w.context();
        let a = ManagedScalar::new(&w, 1.0);
        let z = ManagedScalar::new(&w, 0.0);
        let bad = (&a / &z).eval(&ctx).unwrap();
        let err = bad.materialize().unwrap_err();
        assert!(err.to_string().contains("division by zero"), "got {err}");
        let _ = w.shutdown();
    }

    #[test]
    fn sqrt_of_negative_surfaces_at_materialize() {
        let w = world();
        let ctx = w.context();
        let a = ManagedScalar::new(&w, -1.0);
        let bad = (&a).expr().sqrt().eval(&ctx).unwrap();
        let err = bad.materialize().unwrap_err();
        assert!(err.to_string().contains("sqrt of negative"), "got {err}");
        let _ = w.shutdown();
    }

    #[test]
    fn expression_depth_is_capped() {
        let w = world();
        let ctx = w.context();
        let a = ManagedScalar::new(&w, 1.0);
        let mut e = a.expr();
        for _ in 0..MAX_EXPR_DEPTH {
            e = e + 1.0;
        }
        assert!(matches!(e.eval(&ctx), Err(Error::ExprTooDeep { .. })));
        w.shutdown().unwrap();
    }

    #[test]
    fn guarded_compute_reports_failures() {
        let w = world();
        let ctx = w.context();
        let p = ManagedScalar::new(&w, -2.0);
        let alpha = scalar_compute(&ctx, &[&p], |v| {
            if v[0] <= 0.0 {
                Err(Error::NotSpd(v[0]))
            } else {
                Ok(1.0 / v[0])
            }
        })
        .unwrap();
        let err = alpha.materialize().unwrap_err();
        assert!(err.to_string().contains("positive definite"), "got {err}");
        let _ = w.shutdown();
    }

    #[test]
    fn mixing_scalars_from_different_worlds_is_rejected() {
        let w1 = world();
        let w2 = world();
        let ctx = w1.context();
        let a = ManagedScalar::new(&w2, 1.0);
        assert!(matches!((&a + 1.0).eval(&ctx), Err(Error::WorldMismatch)));
        w1.shutdown().unwrap();
        w2.shutdown().unwrap();
    }

    #[test]
    fn set_waits_for_pending_writers() {
        let w = world();
        let ctx = w.context();
        let a = ManagedScalar::new(&w, 1.0);
        let slow = scalar_compute(&ctx, &[&a], |v| {
            std::thread::sleep(std::time::Duration::from_millis(15));
            Ok(v[0] * 10.0)
        })
        .unwrap();
        slow.set(7.0).unwrap();
        assert_eq!(slow.materialize().unwrap(), 7.0);
        w.shutdown().unwrap();
    }
}
