//! Forward-mode derivatives with respect to one scalar input per row, built
//! out of ordinary tape operations. The tangent is therefore itself a node
//! of the graph, and objectives containing `∂f/∂τ` can be back-propagated
//! to the parameters.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// A value and its derivative with respect to the designated input. A `None`
/// tangent means the derivative is identically zero.
#[derive(Debug, Clone, Copy)]
pub struct Dual {
    pub val: Var,
    pub tan: Option<Var>,
}

impl Dual {
    pub fn constant(val: Var) -> Self {
        Dual { val, tan: None }
    }
}

impl Graph<'_> {
    /// The seed input: an `R x 1` column with unit tangent.
    pub fn dual_input(&mut self, tau: Tensor) -> Dual {
        let rows = tau.rows;
        let val = self.constant(tau);
        let tan = self.constant(Tensor::filled(rows, 1, 1.0));
        Dual { val, tan: Some(tan) }
    }

    /// `x · w` where only `x` carries a tangent.
    pub fn dual_matmul(&mut self, x: Dual, w: Var) -> Result<Dual> {
        let val = self.matmul(x.val, w)?;
        let tan = match x.tan {
            Some(t) => Some(self.matmul(t, w)?),
            None => None,
        };
        Ok(Dual { val, tan })
    }

    pub fn dual_add(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let val = self.add(a.val, b.val)?;
        let tan = match (a.tan, b.tan) {
            (Some(x), Some(y)) => Some(self.add(x, y)?),
            (t, None) | (None, t) => t,
        };
        Ok(Dual { val, tan })
    }

    pub fn dual_add_row(&mut self, a: Dual, row: Var) -> Result<Dual> {
        Ok(Dual {
            val: self.add_row(a.val, row)?,
            tan: a.tan,
        })
    }

    /// ReLU with its tangent masked by `[z > 0]` (subgradient 0 at the kink).
    pub fn dual_relu(&mut self, a: Dual) -> Result<Dual> {
        let val = self.relu(a.val);
        let tan = match a.tan {
            Some(t) => {
                let mask = self.step_mask(a.val);
                Some(self.mask_mul(t, mask)?)
            }
            None => None,
        };
        Ok(Dual { val, tan })
    }

    pub fn dual_softplus(&mut self, a: Dual) -> Result<Dual> {
        let val = self.softplus(a.val);
        let tan = match a.tan {
            Some(t) => {
                let s = self.sigmoid(a.val);
                Some(self.mul(s, t)?)
            }
            None => None,
        };
        Ok(Dual { val, tan })
    }

    /// The tangent, materializing zeros when it is structurally absent.
    pub fn tangent(&mut self, d: Dual) -> Var {
        match d.tan {
            Some(t) => t,
            None => {
                let (r, c) = self.shape(d.val);
                self.constant(Tensor::zeros(r, c))
            }
        }
    }
}

/// Evaluates `f` on the column `tau` and returns `(f(τ), ∂f/∂τ)` as graph
/// nodes; both remain differentiable with respect to the parameters.
pub fn time_derivative<'p>(
    g: &mut Graph<'p>,
    tau: Tensor,
    f: impl FnOnce(&mut Graph<'p>, Dual) -> Result<Dual>,
) -> Result<(Var, Var)> {
    let input = g.dual_input(tau);
    let out = f(g, input)?;
    let tan = g.tangent(out);
    Ok((out.val, tan))
}
