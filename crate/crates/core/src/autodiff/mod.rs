//! Reverse-mode automatic differentiation with support for differentiating
//! through one gradient step.

mod array;
mod params;
mod tape;

pub use array::NumericArray;
pub use params::{GradientVector, Layout, ParamNodes, ParameterVector, Segment};
pub use tape::{Op, Tape, Var};

pub(crate) use array::{gemm, log_softmax_rows, sigmoid};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported op kind `{0}`")]
    UnsupportedOp(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node belongs to a different tape")]
    ForeignNode,
    #[error("parameter layout does not match")]
    LayoutMismatch,
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("step size must be positive, got {0}")]
    InvalidStepSize(f64),
}

/// Gradient of a scalar loss built on `tape` with respect to `params`.
pub fn grad(tape: &Tape, loss: Var, params: &ParamNodes) -> Result<GradientVector, AutodiffError> {
    if params.tape_id() != tape.id() {
        return Err(AutodiffError::ForeignNode);
    }
    let parts = tape.backward(loss, params.vars())?;
    GradientVector::from_parts(params.layout().clone(), parts)
}

/// Gradient of `outer(θ - α ∇inner(θ))` with respect to `θ`.
///
/// With `first_order` the Jacobian of the inner step is taken as identity,
/// which drops the Hessian-vector term.
pub fn grad_through_update<O, I, E>(
    outer: O,
    inner: I,
    theta: &ParameterVector,
    alpha: f64,
    first_order: bool,
) -> Result<GradientVector, E>
where
    O: FnOnce(&mut Tape, &ParamNodes) -> Result<Var, E>,
    I: FnOnce(&mut Tape, &ParamNodes) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_through_update_with_losses(outer, inner, theta, alpha, first_order).map(|r| r.gradient)
}

/// Output of [`grad_through_update_with_losses`].
#[derive(Debug, Clone)]
pub struct UpdateGradient {
    pub gradient: GradientVector,
    pub inner_loss: f64,
    pub outer_loss: f64,
}

/// [`grad_through_update`] that also reports both loss values.
pub fn grad_through_update_with_losses<O, I, E>(
    outer: O,
    inner: I,
    theta: &ParameterVector,
    alpha: f64,
    first_order: bool,
) -> Result<UpdateGradient, E>
where
    O: FnOnce(&mut Tape, &ParamNodes) -> Result<Var, E>,
    I: FnOnce(&mut Tape, &ParamNodes) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(AutodiffError::InvalidStepSize(alpha).into());
    }
    adapted_gradient(outer, inner, theta, alpha, first_order)
}

/// Same as [`grad_through_update_with_losses`] but admits `alpha == 0`,
/// which the optimizer uses for its degenerate-case checks.
pub(crate) fn adapted_gradient<O, I, E>(
    outer: O,
    inner: I,
    theta: &ParameterVector,
    alpha: f64,
    first_order: bool,
) -> Result<UpdateGradient, E>
where
    O: FnOnce(&mut Tape, &ParamNodes) -> Result<Var, E>,
    I: FnOnce(&mut Tape, &ParamNodes) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let leaves = ParamNodes::bind(&mut tape, theta)?;
    let inner_loss = inner(&mut tape, &leaves)?;
    let inner_value = tape.value(inner_loss).item();

    if first_order {
        let g = tape.backward(inner_loss, leaves.vars())?;
        let mut adapted = theta.clone();
        let flat = GradientVector::from_parts(theta.layout().clone(), g)?;
        adapted.axpy(-alpha, &flat)?;
        let mut outer_tape = Tape::new();
        let adapted_leaves = ParamNodes::bind(&mut outer_tape, &adapted)?;
        let outer_loss = outer(&mut outer_tape, &adapted_leaves)?;
        let outer_value = outer_tape.value(outer_loss).item();
        let gradient = grad(&outer_tape, outer_loss, &adapted_leaves)?;
        return Ok(UpdateGradient {
            gradient,
            inner_loss: inner_value,
            outer_loss: outer_value,
        });
    }

    let g = tape.grad_graph(inner_loss, leaves.vars())?;
    let mut adapted = Vec::with_capacity(g.len());
    for (&theta_i, &g_i) in leaves.vars().iter().zip(&g) {
        let step = tape.scale(g_i, alpha)?;
        adapted.push(tape.sub(theta_i, step)?);
    }
    let adapted = leaves.with_vars(adapted);
    let outer_loss = outer(&mut tape, &adapted)?;
    let outer_value = tape.value(outer_loss).item();
    let gradient = grad(&tape, outer_loss, &leaves)?;
    Ok(UpdateGradient {
        gradient,
        inner_loss: inner_value,
        outer_loss: outer_value,
    })
}

#[cfg(test)]
mod tests;
