use crate::error::{Error, Result};
use crate::grad::{GradVector, ParamVector};

/// Per-task loss whose batch is fixed by the implementor.
pub trait TaskObjective {
    fn num_tasks(&self) -> usize;

    /// Loss of `task` at `params` and its gradient with respect to every coordinate.
    fn loss_and_grad(&mut self, task: usize, params: &ParamVector) -> Result<(f64, GradVector)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGrad {
    /// `L(θ ⊙ M)`.
    pub loss: f64,
    /// `∇L(θ ⊙ M) ⊙ M`.
    pub grad: GradVector,
}

/// Gradient of the masked model, zeroed outside the mask.
pub fn masked_gradient<O: TaskObjective + ?Sized>(
    objective: &mut O,
    task: usize,
    params: &ParamVector,
    mask: &[bool],
) -> Result<MaskedGrad> {
    let masked = params.masked(mask)?;
    let (loss, mut grad) = objective.loss_and_grad(task, &masked)?;
    if grad.len() != params.len() {
        return Err(Error::config("objective returned a gradient of the wrong length"));
    }
    grad.apply_mask(mask);
    Ok(MaskedGrad { loss, grad })
}

/// Everything one scoring round needs, gathered on a frozen parameter snapshot.
#[derive(Debug, Clone)]
pub struct RoundGradients {
    /// Unmasked gradient `g_i` per owner.
    pub plain: Vec<GradVector>,
    /// Masked gradient `ḡ_i` per owner.
    pub masked: Vec<GradVector>,
    /// `L(θ ⊙ M_i)` per owner.
    pub masked_loss: Vec<f64>,
}

/// Collects plain and masked gradients for every task under its own mask.
pub fn collect_round<O: TaskObjective + ?Sized>(
    objective: &mut O,
    params: &ParamVector,
    masks: &[&[bool]],
) -> Result<RoundGradients> {
    if masks.len() != objective.num_tasks() {
        return Err(Error::config(format!(
            "{} masks for {} tasks",
            masks.len(),
            objective.num_tasks()
        )));
    }
    let mut out = RoundGradients {
        plain: Vec::with_capacity(masks.len()),
        masked: Vec::with_capacity(masks.len()),
        masked_loss: Vec::with_capacity(masks.len()),
    };
    for (task, mask) in masks.iter().enumerate() {
        let (_, plain) = objective.loss_and_grad(task, params)?;
        let m = masked_gradient(objective, task, params, mask)?;
        out.plain.push(plain);
        out.masked.push(m.grad);
        out.masked_loss.push(m.loss);
    }
    Ok(out)
}
