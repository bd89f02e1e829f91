//! Convolutional LSTM and its bidirectional fusion of a short feature-map
//! sequence.

use crate::error::{Error, Result};
use crate::nn::functional as F;
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{ops, Real, Tensor, Var};

/// Gate order used for the stacked kernel: input, forget, output, candidate.
const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// One ConvLSTM direction. Each gate has its own `[C_h, C_h + C_in, k, k]`
/// kernel over the channel-concatenated `[h, x]`.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub kernels: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy)]
pub struct ConvLstmState<'t, T: Real> {
    pub h: Var<'t, T>,
    pub c: Var<'t, T>,
}

/// Post-activation gate maps of one step.
#[derive(Clone, Copy)]
pub struct Gates<'t, T: Real> {
    pub input: Var<'t, T>,
    pub forget: Var<'t, T>,
    pub output: Var<'t, T>,
    pub candidate: Var<'t, T>,
}

impl ConvLstmCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
    ) -> Result<Self> {
        let fan_in = (hidden + in_channels) * kernel * kernel;
        let mut kernels = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for g in GATES {
            let w = init.kaiming_uniform(vec![hidden, hidden + in_channels, kernel, kernel], fan_in);
            kernels.push(store.add(format!("{name}.w_{g}"), w, ParamKind::Trainable)?);
            biases.push(store.add(format!("{name}.b_{g}"), Tensor::zeros(vec![hidden]), ParamKind::Trainable)?);
        }
        Ok(Self {
            kernels: kernels.try_into().expect("four gates"),
            biases: biases.try_into().expect("four gates"),
            in_channels,
            hidden,
            kernel,
        })
    }

    pub fn num_params(in_channels: usize, hidden: usize, kernel: usize) -> usize {
        4 * (hidden * (hidden + in_channels) * kernel * kernel + hidden)
    }

    pub fn zero_state<'t, T: Real>(&self, tape: &'t crate::tensor::Tape<T>, n: usize, h: usize, w: usize) -> ConvLstmState<'t, T> {
        let shape = vec![n, self.hidden, h, w];
        ConvLstmState {
            h: tape.constant(Tensor::zeros(shape.clone())),
            c: tape.constant(Tensor::zeros(shape)),
        }
    }

    pub fn step_with_gates<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        state: ConvLstmState<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(ConvLstmState<'t, T>, Gates<'t, T>)> {
        let (xs, hs) = (x.shape(), state.h.shape());
        let compatible = xs.len() == 4
            && xs[1] == self.in_channels
            && hs == [xs[0], self.hidden, xs[2], xs[3]]
            && state.c.shape() == hs;
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "convlstm_step",
                lhs: xs,
                rhs: hs,
            });
        }
        let tape = x.tape();
        let w: Vec<_> = self.kernels.iter().map(|&id| tape.param(store, id)).collect();
        let b: Vec<_> = self.biases.iter().map(|&id| tape.param(store, id)).collect();
        let pre = F::conv2d_same(ops::concat(&[state.h, x], 1)?, ops::concat(&w, 0)?, ops::concat(&b, 0)?)?;
        let gate = |k: usize| ops::narrow(pre, 1, k * self.hidden, self.hidden);
        let gates = Gates {
            input: ops::sigmoid(gate(0)?),
            forget: ops::sigmoid(gate(1)?),
            output: ops::sigmoid(gate(2)?),
            candidate: ops::tanh(gate(3)?),
        };
        let c = ops::add(ops::mul(gates.forget, state.c)?, ops::mul(gates.input, gates.candidate)?)?;
        let h = ops::mul(gates.output, ops::tanh(c))?;
        Ok((ConvLstmState { h, c }, gates))
    }

    pub fn step<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        state: ConvLstmState<'t, T>,
        x: Var<'t, T>,
    ) -> Result<ConvLstmState<'t, T>> {
        Ok(self.step_with_gates(store, state, x)?.0)
    }

    /// Final state after folding [`Self::step`] over `seq` from a zero state.
    pub fn run<'t, T: Real>(&self, store: &ParamStore<T>, seq: &[Var<'t, T>]) -> Result<ConvLstmState<'t, T>> {
        let first = seq
            .first()
            .ok_or_else(|| Error::InvalidArgument("ConvLSTM over an empty sequence".into()))?;
        let s = first.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "convlstm",
                shape: s,
                reason: "expected [N, C, H, W]".into(),
            });
        }
        let mut state = self.zero_state(first.tape(), s[0], s[2], s[3]);
        for &x in seq {
            state = self.step(store, state, x)?;
        }
        Ok(state)
    }
}

/// Forward and backward ConvLSTM directions whose final hidden states are
/// concatenated along channels.
#[derive(Debug, Clone)]
pub struct BiConvLstm {
    pub forward_cell: ConvLstmCell,
    pub backward_cell: ConvLstmCell,
}

impl BiConvLstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            forward_cell: ConvLstmCell::new(store, init, &format!("{name}.fwd"), in_channels, hidden, kernel)?,
            backward_cell: ConvLstmCell::new(store, init, &format!("{name}.bwd"), in_channels, hidden, kernel)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, seq: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        bi_convlstm_fuse(&self.forward_cell, &self.backward_cell, store, seq)
    }

    pub fn num_params(in_channels: usize, hidden: usize, kernel: usize) -> usize {
        2 * ConvLstmCell::num_params(in_channels, hidden, kernel)
    }
}

/// `[h_fwd, h_bwd]` where `fwd` reads `seq` in order and `bwd` in reverse.
pub fn bi_convlstm_fuse<'t, T: Real>(
    fwd: &ConvLstmCell,
    bwd: &ConvLstmCell,
    store: &ParamStore<T>,
    seq: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    if let Some(first) = seq.first() {
        let s = first.shape();
        if let Some(other) = seq.iter().find(|v| v.shape() != s) {
            return Err(Error::ShapeMismatch {
                op: "bi_convlstm_fuse",
                lhs: s,
                rhs: other.shape(),
            });
        }
    }
    let hf = fwd.run(store, seq)?.h;
    let reversed: Vec<_> = seq.iter().rev().copied().collect();
    let hb = bwd.run(store, &reversed)?.h;
    ops::concat(&[hf, hb], 1)
}
