//! Training objective: cross-entropy on the first and last branches plus the
//! iterative distillation loss over the intermediate branches.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce0: f64,
    pub ce_k: f64,
    pub idl: f64,
    pub total: f64,
    pub lambda: f64,
}

pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `total = CE(U^0) + CE(U^K) + lambda * sum_{k=1}^{K-1} KL(U^K || U^k)`.
///
/// `logits` holds `U^0..U^K`; `gold` holds the target token per row with
/// [`PAD`](crate::PAD) rows ignored. The final branch acts as a constant
/// teacher inside the distillation term.
pub fn compute_loss<F: Float>(
    tape: &mut Tape<F>,
    logits: &[Var],
    gold: &[usize],
    iterations: usize,
    lambda: f64,
    pad_id: usize,
) -> Result<Loss> {
    compute_loss_with_teacher(tape, logits, gold, iterations, lambda, pad_id, None)
}

/// As [`compute_loss`], but the distillation teacher can be pinned to fixed
/// logits. Finite-difference checks use this so the stop-gradient on the
/// teacher holds on the numeric side too.
pub fn compute_loss_with_teacher<F: Float>(
    tape: &mut Tape<F>,
    logits: &[Var],
    gold: &[usize],
    iterations: usize,
    lambda: f64,
    pad_id: usize,
    teacher: Option<&Tensor<F>>,
) -> Result<Loss> {
    if logits.len() != iterations + 1 {
        return Err(TensorError::Usage(format!(
            "expected {} logits sequences for K = {iterations}, got {}",
            iterations + 1,
            logits.len()
        )));
    }
    let ce0 = tape.cross_entropy(logits[0], gold, pad_id)?;
    let last = logits[iterations];
    let ce_k = tape.cross_entropy(last, gold, pad_id)?;
    let mut total = tape.add(ce0, ce_k)?;
    let mut idl_value = 0.0;
    if iterations >= 2 {
        let mask: Vec<bool> = gold.iter().map(|&t| t != pad_id).collect();
        let teacher = match teacher {
            Some(t) => tape.constant(t.clone()),
            None => tape.detach(last),
        };
        let mut idl = None;
        for &student in &logits[1..iterations] {
            let kl = tape.kl_divergence(student, teacher, &mask)?;
            idl = Some(match idl {
                None => kl,
                Some(acc) => tape.add(acc, kl)?,
            });
        }
        let idl = idl.expect("at least one intermediate branch");
        idl_value = tape.value(idl).item().as_f64();
        let weighted = tape.scale(idl, F::lit(lambda));
        total = tape.add(total, weighted)?;
    }
    let ce0_value = tape.value(ce0).item().as_f64();
    let ce_k_value = tape.value(ce_k).item().as_f64();
    Ok(Loss {
        total,
        breakdown: LossBreakdown {
            ce0: ce0_value,
            ce_k: ce_k_value,
            idl: idl_value,
            total: ce0_value + ce_k_value + lambda * idl_value,
            lambda,
        },
    })
}

/// Warm-start objective: cross-entropy of the initialisation branch only.
pub fn warm_start_loss<F: Float>(
    tape: &mut Tape<F>,
    logits0: Var,
    gold: &[usize],
    pad_id: usize,
) -> Result<Loss> {
    let ce0 = tape.cross_entropy(logits0, gold, pad_id)?;
    let v = tape.value(ce0).item().as_f64();
    Ok(Loss {
        total: ce0,
        breakdown: LossBreakdown {
            ce0: v,
            ce_k: f64::NAN,
            idl: 0.0,
            total: v,
            lambda: 0.0,
        },
    })
}
