//! Gated recurrent unit built from graph primitives.
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = z ⊙ h + (1 - z) ⊙ h̃
//! ```

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::init;
use crate::params::ParamSet;
use crate::Scalar;
use rand::Rng;

/// Graph handles for one GRU layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

/// Parameter names appended by [`GruParams::register`], in order.
pub const GRU_PARAM_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruParams {
    /// Adds freshly initialized GRU parameters to `params` under
    /// `prefix.<name>`.
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) {
        for name in &GRU_PARAM_NAMES[..3] {
            params.push(
                format!("{prefix}.{name}"),
                init::uniform_fan_in(&[input, hidden], hidden, rng),
            );
        }
        for name in &GRU_PARAM_NAMES[3..6] {
            params.push(
                format!("{prefix}.{name}"),
                init::uniform_fan_in(&[hidden, hidden], hidden, rng),
            );
        }
        for name in &GRU_PARAM_NAMES[6..] {
            params.push(format!("{prefix}.{name}"), crate::Tensor::zeros(&[hidden]));
        }
    }

    /// Builds handles from nine consecutive bound variables in
    /// [`GRU_PARAM_NAMES`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 9, "GRU expects nine parameter tensors");
        Self {
            w_z: vars[0],
            w_r: vars[1],
            w_h: vars[2],
            u_z: vars[3],
            u_r: vars[4],
            u_h: vars[5],
            b_z: vars[6],
            b_r: vars[7],
            b_h: vars[8],
        }
    }
}

/// One GRU step: `x_t` is `[B, F]`, `h_prev` is `[B, H]`.
pub fn gru_cell<T: Scalar>(g: &mut Graph<T>, x_t: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let (xs, hs) = (g.shape(x_t).to_vec(), g.shape(h_prev).to_vec());
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
        return Err(shape_err("gru_cell", format!("input {xs:?} and state {hs:?}")));
    }
    let gate = |g: &mut Graph<T>, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
        let xw = g.dense(x_t, w, Some(b))?;
        let hu = g.matmul(h, u)?;
        g.add(xw, hu)
    };
    let z_pre = gate(g, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = g.tanh(cand_pre);
    let keep = g.mul(z, h_prev)?;
    let one_minus_z = g.one_minus(z);
    let update = g.mul(one_minus_z, cand)?;
    g.add(keep, update)
}

/// Unrolls the GRU over axis 1 of a `[B, S, F]` sequence from a zero
/// initial state and returns the final `[B, H]` state.
pub fn gru_sequence<T: Scalar>(g: &mut Graph<T>, seq: Var, p: &GruParams) -> Result<Var> {
    let s = g.shape(seq).to_vec();
    if s.len() != 3 {
        return Err(shape_err("gru_sequence", format!("expected [B, S, F], got {s:?}")));
    }
    let hidden = g.shape(p.u_z)[0];
    let mut h = g.constant(crate::Tensor::zeros(&[s[0], hidden]));
    for step in 0..s[1] {
        let x = g.select(seq, step)?;
        h = gru_cell(g, x, h, p)?;
    }
    Ok(h)
}
