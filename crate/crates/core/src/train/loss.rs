use crate::error::{Error, Result};
use crate::tensor::{ops, Real, Var};

pub const BCE_CLAMP: f64 = 1e-7;

/// Scalar training objective over probabilities `pred` and binary `gt` of
/// equal shape.
pub trait Loss {
    fn name(&self) -> &'static str;
    fn forward<'t>(&self, pred: Var<'t, f32>, gt: Var<'t, f32>) -> Result<Var<'t, f32>>;
    fn forward_f64<'t>(&self, pred: Var<'t, f64>, gt: Var<'t, f64>) -> Result<Var<'t, f64>>;
}

fn check<T: Real>(pred: &Var<'_, T>, gt: &Var<'_, T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    Ok(())
}

/// Mean of `−[g·log p + (1−g)·log(1−p)]`, `p` clamped to `[1e-7, 1−1e-7]`.
pub fn bce<'t, T: Real>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    check(&pred, &gt)?;
    let p = ops::clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let one_minus = |v: Var<'t, T>| ops::add_scalar(ops::scale(v, -1.0), 1.0);
    let pos = ops::mul(gt, ops::log(p))?;
    let neg = ops::mul(one_minus(gt), ops::log(one_minus(p)))?;
    Ok(ops::scale(ops::mean_all(ops::add(pos, neg)?), -1.0))
}

/// `1 − (2Σpg + 1)/(Σp + Σg + 1)` over the whole batch.
pub fn dice_loss<'t, T: Real>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    check(&pred, &gt)?;
    let inter = ops::add_scalar(ops::scale(ops::sum_all(ops::mul(pred, gt)?), 2.0), 1.0);
    let denom = ops::add_scalar(ops::add(ops::sum_all(pred), ops::sum_all(gt))?, 1.0);
    Ok(ops::add_scalar(ops::scale(ops::div(inter, denom)?, -1.0), 1.0))
}

pub fn bce_dice<'t, T: Real>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    ops::add(bce(pred, gt)?, dice_loss(pred, gt)?)
}

macro_rules! loss_kind {
    ($ty:ident, $name:literal, $f:ident) => {
        pub struct $ty;

        impl Loss for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn forward<'t>(&self, pred: Var<'t, f32>, gt: Var<'t, f32>) -> Result<Var<'t, f32>> {
                $f(pred, gt)
            }
            fn forward_f64<'t>(&self, pred: Var<'t, f64>, gt: Var<'t, f64>) -> Result<Var<'t, f64>> {
                $f(pred, gt)
            }
        }
    };
}

loss_kind!(Bce, "bce", bce);
loss_kind!(Dice, "dice", dice_loss);
loss_kind!(BceDice, "bce+dice", bce_dice);

const LOSSES: &[fn() -> Box<dyn Loss>] = &[|| Box::new(Bce), || Box::new(Dice), || Box::new(BceDice)];

pub fn loss_names() -> Vec<&'static str> {
    LOSSES.iter().map(|make| make().name()).collect()
}

pub fn loss_by_name(name: &str) -> Result<Box<dyn Loss>> {
    LOSSES
        .iter()
        .map(|make| make())
        .find(|l| l.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown loss {name:?} (expected one of {})", loss_names().join(", "))))
}
