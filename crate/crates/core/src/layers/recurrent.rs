use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// `h' = tanh([x, h] W + b)`
    Plain,
    /// Gated long short-term memory with input, forget, candidate and output gates.
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Plain => 1,
            CellKind::Lstm => 4,
        }
    }
}

/// Hidden (and, for LSTM cells, cell) state of one recurrent layer.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub hidden: Var,
    pub cell: Option<Var>,
}

impl CellState {
    pub fn zeros(g: &mut Graph, kind: CellKind, batch: usize, hidden_dim: usize) -> Result<Self> {
        let hidden = g.constant(Tensor::zeros(&[batch, hidden_dim]))?;
        let cell = match kind {
            CellKind::Plain => None,
            CellKind::Lstm => Some(g.constant(Tensor::zeros(&[batch, hidden_dim]))?),
        };
        Ok(CellState { hidden, cell })
    }
}

/// One recurrent layer. Weights act on the concatenation `[x, h]`, so the
/// weight is `[(input_dim + hidden_dim) x gates * hidden_dim]`; LSTM gate
/// columns are ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl RecurrentCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = input_dim + hidden_dim;
        let cols = kind.gates() * hidden_dim;
        let bound = 1.0 / (rows as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[rows, cols], bound));
        let mut b = uniform(rng, &[cols], bound);
        if kind == CellKind::Lstm {
            // forget gate starts open
            b.data_mut()[hidden_dim..2 * hidden_dim].fill(1.0);
        }
        let bias = store.add(format!("{name}.bias"), b);
        RecurrentCell { kind, input_dim, hidden_dim, weight, bias }
    }

    /// Parameters owned by this cell: `gates * (input + hidden + 1) * hidden`.
    pub fn param_count(&self) -> usize {
        self.kind.gates() * (self.input_dim + self.hidden_dim + 1) * self.hidden_dim
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Result<CellState> {
        CellState::zeros(g, self.kind, batch, self.hidden_dim)
    }

    /// Advances one time step. The output is the new hidden state.
    pub fn step(&self, g: &mut Graph, params: &Binding, input: Var, state: &CellState) -> Result<CellState> {
        let xs = g.shape(input).to_vec();
        let hs = g.shape(state.hidden).to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim || hs != [xs[0], self.hidden_dim] {
            return Err(Error::shape(
                "cell_step",
                format!("input {xs:?}, hidden {hs:?} for cell {}->{}", self.input_dim, self.hidden_dim),
            ));
        }
        let xh = g.concat(&[input, state.hidden], Axis::Last)?;
        let pre = g.matmul(xh, params.var(self.weight))?;
        let pre = g.add(pre, params.var(self.bias))?;
        match self.kind {
            CellKind::Plain => Ok(CellState { hidden: g.tanh(pre)?, cell: None }),
            CellKind::Lstm => {
                let cell = state.cell.ok_or_else(|| Error::shape("cell_step", "LSTM state without cell"))?;
                let both = g.lstm_update(pre, cell)?;
                let h = self.hidden_dim;
                Ok(CellState {
                    hidden: g.slice(both, Axis::Last, 0, h)?,
                    cell: Some(g.slice(both, Axis::Last, h, h)?),
                })
            }
        }
    }
}

/// Per-step outputs of the top layer plus every layer's final state.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub outputs: Vec<Var>,
    pub finals: Vec<CellState>,
}

impl Unrolled {
    /// Collects the per-step `[B x H]` outputs into a `[B x T x H]` tensor.
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        let first = g.value(self.outputs[0]);
        let (b, h) = (first.shape()[0], first.shape()[1]);
        let t = self.outputs.len();
        let mut data = vec![0.0; b * t * h];
        for (step, &v) in self.outputs.iter().enumerate() {
            let val = g.value(v);
            for r in 0..b {
                data[(r * t + step) * h..(r * t + step + 1) * h].copy_from_slice(val.row(r));
            }
        }
        Tensor::new(vec![b, t, h], data).expect("consistent unroll shape")
    }
}

/// Stack of recurrent layers where layer `k` consumes the full output
/// sequence of layer `k - 1`.
#[derive(Clone, Debug)]
pub struct RecurrentStack {
    pub cells: Vec<RecurrentCell>,
}

impl RecurrentStack {
    pub fn new(cells: Vec<RecurrentCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidConfig("recurrent stack needs at least one layer".into()));
        }
        for (k, pair) in cells.windows(2).enumerate() {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(Error::shape(
                    "stack_unroll",
                    format!("layer {} input {} != layer {k} hidden {}", k + 1, pair[1].input_dim, pair[0].hidden_dim),
                ));
            }
        }
        Ok(RecurrentStack { cells })
    }

    /// Builds `dims.len()` layers of `kind`, the first taking `input_dim`.
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input_dim: usize,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(dims.len());
        let mut prev = input_dim;
        for (k, &h) in dims.iter().enumerate() {
            cells.push(RecurrentCell::new(store, &format!("{name}.{k}"), kind, prev, h, rng));
            prev = h;
        }
        Self::new(cells)
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.cells.last().expect("non-empty stack").hidden_dim
    }

    /// Unrolls over `inputs` (one `[B x input_dim]` variable per step).
    /// States start at zero unless `initial` supplies one per layer.
    ///
    /// With `row_mask`, a row whose entry is `false` at step `t` keeps its
    /// previous state, so every layer's final state is the state after
    /// that row's last real step.
    pub fn unroll(
        &self,
        g: &mut Graph,
        params: &Binding,
        inputs: &[Var],
        initial: Option<&[CellState]>,
        row_mask: Option<&[Vec<bool>]>,
    ) -> Result<Unrolled> {
        if let Some(m) = row_mask {
            if m.len() != inputs.len() {
                return Err(Error::shape("stack_unroll", format!("{} mask steps for {} inputs", m.len(), inputs.len())));
            }
        }
        let Some(&first) = inputs.first() else {
            return Err(Error::EmptySequence);
        };
        let batch = g.shape(first)[0];
        if let Some(init) = initial {
            if init.len() != self.cells.len() {
                return Err(Error::shape(
                    "stack_unroll",
                    format!("{} initial states for {} layers", init.len(), self.cells.len()),
                ));
            }
        }
        let mut layer_inputs = inputs.to_vec();
        let mut finals = Vec::with_capacity(self.cells.len());
        for (k, cell) in self.cells.iter().enumerate() {
            let mut state = match initial {
                Some(init) => init[k],
                None => cell.zero_state(g, batch)?,
            };
            let mut outputs = Vec::with_capacity(layer_inputs.len());
            for (t, &x) in layer_inputs.iter().enumerate() {
                let next = cell.step(g, params, x, &state)?;
                state = match row_mask.map(|m| &m[t]) {
                    Some(mask) if !mask.iter().all(|&v| v) => CellState {
                        hidden: g.select_rows(mask, next.hidden, state.hidden)?,
                        cell: match (next.cell, state.cell) {
                            (Some(a), Some(b)) => Some(g.select_rows(mask, a, b)?),
                            _ => None,
                        },
                    },
                    _ => next,
                };
                outputs.push(state.hidden);
            }
            finals.push(state);
            layer_inputs = outputs;
        }
        Ok(Unrolled { outputs: layer_inputs, finals })
    }
}

/// Splits a `[B x T x D]` tensor into `T` constant `[B x D]` step inputs.
pub fn steps_from_tensor(g: &mut Graph, sequence: &Tensor) -> Result<Vec<Var>> {
    let s = sequence.shape();
    if s.len() != 3 {
        return Err(Error::shape("stack_unroll", format!("expected [B x T x D], got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    (0..t)
        .map(|step| {
            let mut data = Vec::with_capacity(b * d);
            for r in 0..b {
                let off = (r * t + step) * d;
                data.extend_from_slice(&sequence.data()[off..off + d]);
            }
            g.constant(Tensor::new(vec![b, d], data)?)
        })
        .collect()
}
