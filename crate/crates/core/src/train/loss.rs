use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    L1,
    L2,
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Loss::L1),
            "l2" => Ok(Loss::L2),
            _ => Err(Error::invalid("loss", format!("unknown loss `{s}` (expected l1|l2)"))),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::L1 => "l1",
            Loss::L2 => "l2",
        })
    }
}

impl Loss {
    /// Records the loss between `pred` and `target` on the tape.
    pub fn on_tape(self, tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
        let diff = tape.sub(pred, target)?;
        Ok(match self {
            Loss::L1 => tape.abs_mean(diff),
            Loss::L2 => tape.sq_mean(diff),
        })
    }

    pub fn eval(self, pred: &Tensor, target: &Tensor) -> Result<f64> {
        match self {
            Loss::L1 => l1_loss(pred, target),
            Loss::L2 => l2_loss(pred, target),
        }
    }
}

fn check(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid(op, "empty tensors"));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check("l1_loss", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Mean squared difference.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check("l2_loss", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}
