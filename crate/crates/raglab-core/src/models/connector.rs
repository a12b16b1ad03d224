//! Two-layer GELU MLP applied per row. One instance maps visual features
//! into decoder space; a second, separate instance maps compressed retrieval
//! latents the same way. A zero-row input is legal and yields zero rows.

use super::{bind_fields, init_weight, init_zeros, visit_fields, visit_fields_mut};
use super::ParamReg;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Connector {
    pub d_in: usize,
    pub d_hid: usize,
    pub d_out: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ConnectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Connector {
    pub fn new(d_in: usize, d_hid: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Connector {
            d_in,
            d_hid,
            d_out,
            w1: init_weight(rng, d_in, d_hid, super::signal_std(d_in)),
            b1: init_zeros(d_hid),
            w2: init_weight(rng, d_hid, d_out, super::signal_std(d_hid)),
            b2: init_zeros(d_out),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, prefix: &str, reg: &mut ParamReg) -> ConnectorVars {
        bind_fields!(self, tape, trainable, prefix, reg, ConnectorVars, [w1, b1, w2, b2])
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_fields!(self, prefix, f, [w1, b1, w2, b2]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f, [w1, b1, w2, b2]);
    }
}

/// Map `[t, d_in]` rows to `[t, d_out]` rows.
pub fn connector_forward(tape: &mut Tape, c: &Connector, vars: &ConnectorVars, x: Var) -> Result<Var> {
    let got = tape.value(x).shape[1];
    if got != c.d_in {
        return Err(Error::Shape(format!(
            "connector expects width {}, got {}",
            c.d_in, got
        )));
    }
    let h = tape.matmul(x, vars.w1)?;
    let h = tape.add_row(h, vars.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, vars.w2)?;
    tape.add_row(h, vars.b2)
}
