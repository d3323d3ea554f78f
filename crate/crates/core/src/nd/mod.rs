//! Small dense tensors and exact differentiation.
//!
//! Two routes deliver derivatives: the scalar [`Tape`] here, which handles any
//! composition of its primitives including gradients of gradients, and the
//! hand-derived batched kernels of [`crate::energy_model::Mlp`]. Tests hold the
//! two against each other and against finite differences.

mod tape;
mod tensor;
pub(crate) mod vmath;

pub use tape::{dot, sum, Tape, Var};
pub use tensor::{ParamVector, Tensor};

#[cfg(test)]
use tape::sigmoid;
pub(crate) use tensor::gemm;

use crate::error::{Error, Result};

/// Parameter leaves on a tape, laid out like the [`ParamVector`] they came from.
pub struct ParamVars<'t, 'p> {
    layout: &'p ParamVector,
    vars: Vec<Var<'t>>,
}

impl<'t, 'p> ParamVars<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamVector) -> Self {
        ParamVars {
            layout: params,
            vars: tape.vars(&params.to_flat()),
        }
    }

    /// Leaves of segment `name`, in row-major order.
    ///
    /// Panics if the segment does not exist; the layout is fixed by the caller.
    pub fn segment(&self, name: &str) -> &[Var<'t>] {
        let off = self
            .layout
            .offset_of(name)
            .unwrap_or_else(|| panic!("no parameter segment {name:?}"));
        let len = self.layout.segment(name).map_or(0, Tensor::len);
        &self.vars[off..off + len]
    }

    pub fn all(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Exact gradient of the scalar `f(x, t)` with respect to the point `x`.
pub fn grad_input<F>(f: F, x: &[f64], t: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let xs = tape.vars(x);
    let tv = tape.constant(t);
    let y = f(&tape, &xs, tv);
    let g = tape.grad(y, &xs);
    if tape.faulted() {
        return Err(Error::NumericFault(
            "non-finite intermediate while differentiating with respect to input".into(),
        ));
    }
    Ok(g.iter().map(Var::value).collect())
}

/// Exact gradient of `loss(θ)` with respect to every parameter. The loss may
/// call [`Tape::grad`] internally (e.g. to form a score); those inner
/// gradients are differentiated through.
pub fn grad_params<F>(loss: F, theta: &ParamVector) -> Result<ParamVector>
where
    F: for<'t, 'p> Fn(&'t Tape, &ParamVars<'t, 'p>) -> Var<'t>,
{
    let tape = Tape::new();
    let pv = ParamVars::new(&tape, theta);
    let y = loss(&tape, &pv);
    let g = tape.grad(y, pv.all());
    if tape.faulted() {
        return Err(Error::NumericFault(
            "non-finite intermediate while differentiating with respect to parameters".into(),
        ));
    }
    let flat: Vec<f64> = g.iter().map(Var::value).collect();
    let mut out = theta.zeros_like();
    out.set_flat(&flat)?;
    Ok(out)
}
