//! Adaptive computation time over a GRU cell.
//!
//! Each input step runs one or more rounds of the cell. Round `n` emits a
//! halting value `h^n = σ(W_h u^n + b_h)`; computation stops at the first
//! round where the accumulated halting values reach `1 - ε`, or at the cap
//! `L`. The rounds are blended into a mean-field state and output with the
//! halting distribution `p`.

use serde::{Deserialize, Serialize};

use crate::cells::{augment_flag, gru_step, head_forward, GruParams, HeadParams};
use crate::error::{Error, Result};
use crate::numeric::{glorot_init, BoundParams, NumericError, ParamStore, Rng, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Halting trace of one input step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingRecord {
    pub h_values: Vec<f64>,
    pub n_t: usize,
    pub p: Vec<f64>,
    pub remainder: f64,
}

impl HaltingRecord {
    /// The record of a step that always runs exactly one round.
    pub fn single() -> Self {
        Self {
            h_values: vec![],
            n_t: 1,
            p: vec![1.0],
            remainder: 1.0,
        }
    }

    pub fn ponder(&self) -> f64 {
        self.n_t as f64 + self.remainder
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self, epsilon: f64, max_rounds: usize) -> std::result::Result<(), String> {
        let n = self.n_t;
        if n < 1 || n > max_rounds {
            return Err(format!("n_t {n} outside 1..={max_rounds}"));
        }
        if self.h_values.len() != n || self.p.len() != n {
            return Err(format!(
                "lengths h={} p={} n_t={n}",
                self.h_values.len(),
                self.p.len()
            ));
        }
        let before: f64 = self.h_values[..n - 1].iter().sum();
        if (self.p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err("p does not sum to 1".into());
        }
        if self.p[..n - 1] != self.h_values[..n - 1] {
            return Err("p differs from h before the last round".into());
        }
        if self.p[n - 1] != self.remainder || self.remainder != 1.0 - before {
            return Err("remainder mismatch".into());
        }
        if before >= 1.0 - epsilon || self.remainder <= epsilon {
            return Err(format!("halted late: sum before last round {before}"));
        }
        if before + self.h_values[n - 1] < 1.0 - epsilon && n != max_rounds {
            return Err("stopped before threshold or cap".into());
        }
        Ok(())
    }
}

/// Incremental form of the halting rule, fed one halting value per round.
#[derive(Clone, Debug)]
pub struct HaltingAccumulator {
    epsilon: f64,
    max_rounds: usize,
    h_values: Vec<f64>,
    halted: bool,
}

impl HaltingAccumulator {
    pub fn new(epsilon: f64, max_rounds: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::HaltingSettings(format!(
                "epsilon {epsilon} outside (0, 1)"
            )));
        }
        if max_rounds == 0 {
            return Err(Error::HaltingSettings("L must be at least 1".into()));
        }
        Ok(Self {
            epsilon,
            max_rounds,
            h_values: Vec::with_capacity(max_rounds),
            halted: false,
        })
    }

    /// Registers the halting value of the next round; `true` means stop.
    pub fn push(&mut self, h: f64) -> Result<bool> {
        assert!(!self.halted, "push after halting");
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::HaltingRange {
                value: h,
                round: self.h_values.len() + 1,
            });
        }
        self.h_values.push(h);
        let total: f64 = self.h_values.iter().sum();
        self.halted = total >= 1.0 - self.epsilon || self.h_values.len() == self.max_rounds;
        Ok(self.halted)
    }

    pub fn rounds(&self) -> usize {
        self.h_values.len()
    }

    pub fn finish(self) -> HaltingRecord {
        assert!(self.halted, "finish before halting");
        let n = self.h_values.len();
        let remainder = 1.0 - self.h_values[..n - 1].iter().sum::<f64>();
        let mut p = self.h_values[..n - 1].to_vec();
        p.push(remainder);
        HaltingRecord {
            h_values: self.h_values,
            n_t: n,
            p,
            remainder,
        }
    }
}

/// Runs the halting rule over a stream of halting values.
///
/// `next_h(n)` is asked for the value of round `n` (1-based) until the rule
/// stops.
pub fn halt_schedule(
    mut next_h: impl FnMut(usize) -> f64,
    epsilon: f64,
    max_rounds: usize,
) -> Result<HaltingRecord> {
    let mut acc = HaltingAccumulator::new(epsilon, max_rounds)?;
    while !acc.push(next_h(acc.rounds() + 1))? {}
    Ok(acc.finish())
}

/// Differentiable halting distribution: `p_i = h_i` before the last round,
/// the last entry is the remainder `1 - Σ_{i<N} h_i`.
///
/// The round count is a constant for differentiation; gradients flow
/// through the halting values only.
pub fn halting_distribution(tape: &Tape, h: &[Var], n_t: usize) -> Result<(Vec<Var>, Var)> {
    let one = tape.constant(Tensor::scalar(1.0));
    let remainder = if n_t == 1 {
        one
    } else {
        let before = tape.add_all(&h[..n_t - 1])?;
        tape.sub(one, before)?
    };
    let mut p = h[..n_t - 1].to_vec();
    p.push(remainder);
    Ok((p, remainder))
}

/// `Σ p_i v_i` for same-shape vectors `v_i`.
pub fn mean_field(tape: &Tape, p: &[Var], values: &[Var]) -> Result<Var, NumericError> {
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let terms = p
        .iter()
        .zip(values)
        .map(|(&w, &v)| tape.mul(w, v))
        .collect::<Result<Vec<_>, _>>()?;
    tape.add_all(&terms)
}

#[derive(Clone, Copy, Debug)]
pub struct ActParams {
    pub cell: GruParams,
    /// Absent for encoder cells, which produce no outputs.
    pub head: Option<HeadParams>,
    pub w_h: Var,
    pub b_h: Var,
}

impl ActParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
        GruParams::init(store, &format!("{prefix}.cell"), input + 1, hidden, rng);
        store.insert(format!("{prefix}.halt.w_h"), glorot_init(rng, 1, hidden));
        store.insert(format!("{prefix}.halt.b_h"), Tensor::zeros(&[1]));
    }

    pub fn bind(bound: &BoundParams, prefix: &str, head: Option<HeadParams>) -> Result<Self> {
        Ok(Self {
            cell: GruParams::bind(bound, &format!("{prefix}.cell"))?,
            head,
            w_h: bound.get(&format!("{prefix}.halt.w_h"))?,
            b_h: bound.get(&format!("{prefix}.halt.b_h"))?,
        })
    }
}

/// Result of one ACT step.
#[derive(Clone, Debug)]
pub struct ActStep {
    /// Mean-field state passed to the next step.
    pub state: Var,
    /// Mean-field output per head; empty without a head.
    pub outputs: Vec<Var>,
    pub record: HaltingRecord,
    /// Differentiable remainder of the last round.
    pub remainder: Var,
    pub intermediate_states: Vec<Var>,
}

pub fn act_step(
    tape: &Tape,
    x: &Tensor,
    u_prev: Var,
    params: &ActParams,
    epsilon: f64,
    max_rounds: usize,
) -> Result<ActStep> {
    let mut acc = HaltingAccumulator::new(epsilon, max_rounds)?;
    let mut states = Vec::new();
    let mut outputs: Vec<Vec<Var>> = Vec::new();
    let mut halts = Vec::new();
    let mut state = u_prev;
    let flagged = [augment_flag(x, true), augment_flag(x, false)];
    let inputs = [
        tape.constant(flagged[0].clone()),
        tape.constant(flagged[1].clone()),
    ];
    loop {
        let first = states.is_empty();
        state = gru_step(tape, inputs[usize::from(!first)], state, &params.cell)?;
        if let Some(head) = &params.head {
            outputs.push(head_forward(tape, state, head)?);
        }
        let h = tape.sigmoid(tape.affine(params.w_h, state, params.b_h)?)?;
        states.push(state);
        halts.push(h);
        if acc.push(tape.scalar(h))? {
            break;
        }
    }
    let record = acc.finish();
    let (p, remainder) = halting_distribution(tape, &halts, record.n_t)?;
    let mean_state = mean_field(tape, &p, &states)?;
    let heads = params.head.map_or(0, |h| h.heads);
    let mut mean_outputs = Vec::with_capacity(heads);
    for k in 0..heads {
        let per_round: Vec<Var> = outputs.iter().map(|o| o[k]).collect();
        mean_outputs.push(mean_field(tape, &p, &per_round)?);
    }
    Ok(ActStep {
        state: mean_state,
        outputs: mean_outputs,
        record,
        remainder,
        intermediate_states: states,
    })
}

/// Total ponder cost `Σ_t (N_t + remainder_t)`.
pub fn ponder_cost(records: &[HaltingRecord]) -> f64 {
    records.iter().map(HaltingRecord::ponder).sum()
}

/// Task loss plus `tau` times the ponder cost.
pub fn act_loss(task_loss: f64, records: &[HaltingRecord], tau: f64) -> f64 {
    task_loss + tau * ponder_cost(records)
}
