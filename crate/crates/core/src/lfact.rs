//! Layer-flexible adaptive computation time.
//!
//! Every round within a step is a layer with its own primary state
//! `u_t^n`. Layer `n` of step `t` starts from `û = g(ū_{t-1}^n, q)`, where
//! `q` is the previous layer's primary state (for layer 1, the deepest
//! primary of step `t-1`) and `ū_{t-1}^n` is a transmission state: an
//! attention-weighted blend of the previous step's primaries
//!
//! ```text
//! β_i = V_nᵀ σ(W_Q q + V_Q u_{t-1}^i + b_Q),   i ≤ c
//! α   = softmax(β)
//! ū   = Σ α_i u_{t-1}^i
//! ```
//!
//! with `c = min(N_{t-1}, n)` (limited) or `c = N_{t-1}` (all). Transmission
//! states are built on demand while step `t` runs, since the query only
//! exists at that point. The step output is the deepest layer's output.

use serde::{Deserialize, Serialize};

use crate::act::{halting_distribution, HaltingAccumulator, HaltingRecord};
use crate::cells::{gru_step, head_forward, GruParams, HeadParams};
use crate::error::{Error, Result};
use crate::numeric::{glorot_init, BoundParams, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Keys limited to layers `i ≤ n`.
    Ltd,
    /// Keys from every layer of the previous step.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinerKind {
    Affine,
    Mlp,
}

pub const MLP_DEPTH: usize = 2;

/// Combiner `g(x, y)` weights.
#[derive(Clone, Debug)]
pub enum Combiner {
    /// `σ(W_1 x + W_2 y + b)`.
    Affine { w1: Var, w2: Var, b: Var },
    /// `tanh(W_1 x + W_2 y + b)` followed by `depth - 1` dense layers,
    /// tanh in between and sigmoid on the last.
    Mlp {
        w1: Var,
        w2: Var,
        b: Var,
        layers: Vec<(Var, Var)>,
    },
}

impl Combiner {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: CombinerKind,
        hidden: usize,
        rng: &mut Rng,
    ) {
        store.insert(format!("{prefix}.w1"), glorot_init(rng, hidden, hidden));
        store.insert(format!("{prefix}.w2"), glorot_init(rng, hidden, hidden));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[hidden]));
        if kind == CombinerKind::Mlp {
            for k in 1..MLP_DEPTH {
                store.insert(
                    format!("{prefix}.layer{k}.w"),
                    glorot_init(rng, hidden, hidden),
                );
                store.insert(format!("{prefix}.layer{k}.b"), Tensor::zeros(&[hidden]));
            }
        }
    }

    pub fn bind(bound: &BoundParams, prefix: &str, kind: CombinerKind) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        let (w1, w2, b) = (get("w1")?, get("w2")?, get("b")?);
        Ok(match kind {
            CombinerKind::Affine => Combiner::Affine { w1, w2, b },
            CombinerKind::Mlp => {
                let layers = (1..MLP_DEPTH)
                    .map(|k| Ok((get(&format!("layer{k}.w"))?, get(&format!("layer{k}.b"))?)))
                    .collect::<Result<Vec<_>>>()?;
                Combiner::Mlp { w1, w2, b, layers }
            }
        })
    }
}

/// `g(transmission, prev_output)`.
pub fn combine_g(tape: &Tape, transmission: Var, prev_output: Var, g: &Combiner) -> Result<Var> {
    let pre = |w1: Var, w2: Var, b: Var| -> Result<Var> {
        let a = tape.matmul(w1, transmission)?;
        let c = tape.matmul(w2, prev_output)?;
        let s = tape.add(a, c)?;
        Ok(tape.add(s, b)?)
    };
    Ok(match g {
        Combiner::Affine { w1, w2, b } => tape.sigmoid(pre(*w1, *w2, *b)?)?,
        Combiner::Mlp { w1, w2, b, layers } => {
            let mut h = tape.tanh(pre(*w1, *w2, *b)?)?;
            for (k, &(w, bias)) in layers.iter().enumerate() {
                let z = tape.affine(w, h, bias)?;
                h = if k + 1 == layers.len() {
                    tape.sigmoid(z)?
                } else {
                    tape.tanh(z)?
                };
            }
            h
        }
    })
}

/// All LFACT weights bound to a tape.
#[derive(Clone, Debug)]
pub struct LfactParams {
    pub cell: GruParams,
    /// Absent for encoder cells.
    pub head: Option<HeadParams>,
    pub combiner: Combiner,
    pub w_q: Var,
    pub v_q: Var,
    pub b_q: Var,
    /// `L x H`; row `n - 1` is the layer-`n` projection `V_n`.
    pub v: Var,
    pub w_h: Var,
    pub v_h: Var,
    pub b_h: Var,
    pub strategy: Strategy,
    pub max_layers: usize,
}

impl LfactParams {
    /// Adds cell, combiner, attention and halting weights under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        max_layers: usize,
        combiner: CombinerKind,
        rng: &mut Rng,
    ) {
        GruParams::init(store, &format!("{prefix}.cell"), input, hidden, rng);
        Combiner::init(store, &format!("{prefix}.g"), combiner, hidden, rng);
        store.insert(
            format!("{prefix}.attn.w_q"),
            glorot_init(rng, hidden, hidden),
        );
        store.insert(
            format!("{prefix}.attn.v_q"),
            glorot_init(rng, hidden, hidden),
        );
        store.insert(format!("{prefix}.attn.b_q"), Tensor::zeros(&[hidden]));
        store.insert(
            format!("{prefix}.attn.v"),
            glorot_init(rng, max_layers, hidden),
        );
        store.insert(format!("{prefix}.halt.w_h"), glorot_init(rng, 1, hidden));
        store.insert(format!("{prefix}.halt.v_h"), glorot_init(rng, 1, hidden));
        store.insert(format!("{prefix}.halt.b_h"), Tensor::zeros(&[1]));
    }

    pub fn bind(
        bound: &BoundParams,
        prefix: &str,
        head: Option<HeadParams>,
        combiner: CombinerKind,
        strategy: Strategy,
        max_layers: usize,
    ) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(Self {
            cell: GruParams::bind(bound, &format!("{prefix}.cell"))?,
            head,
            combiner: Combiner::bind(bound, &format!("{prefix}.g"), combiner)?,
            w_q: get("attn.w_q")?,
            v_q: get("attn.v_q")?,
            b_q: get("attn.b_q")?,
            v: get("attn.v")?,
            w_h: get("halt.w_h")?,
            v_h: get("halt.v_h")?,
            b_h: get("halt.b_h")?,
            strategy,
            max_layers,
        })
    }
}

/// Per-step LFACT state.
#[derive(Clone, Debug)]
pub struct StepTrace {
    /// `u_t^1 .. u_t^{N_t}`.
    pub primaries: Vec<Var>,
    /// `o_t^n` per layer, one entry per head; empty without a head.
    pub outputs: Vec<Vec<Var>>,
    pub record: HaltingRecord,
    /// `ū_{t-1}^1 .. ū_{t-1}^{N_t}` consumed by this step's layers.
    pub transmission_used: Vec<Var>,
    /// Attention weights behind each entry of `transmission_used`.
    pub attention: Vec<Vec<f64>>,
    /// Differentiable remainder of the last layer.
    pub remainder: Var,
}

impl StepTrace {
    /// Trace before the first step: one zero primary state.
    pub fn initial(tape: &Tape, hidden: usize) -> Self {
        let zero = tape.constant(Tensor::zeros(&[hidden]));
        Self {
            primaries: vec![zero],
            outputs: vec![],
            record: HaltingRecord::single(),
            transmission_used: vec![],
            attention: vec![],
            remainder: tape.constant(Tensor::scalar(1.0)),
        }
    }

    /// Step output `y_t`: the deepest layer's output.
    pub fn y(&self) -> &[Var] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `V_Q u_i + b_Q` for each previous primary, built once per step.
pub struct KeyCache {
    keys: Vec<Option<Var>>,
}

impl KeyCache {
    pub fn new(len: usize) -> Self {
        Self {
            keys: vec![None; len],
        }
    }

    fn get(&mut self, tape: &Tape, i: usize, u: Var, params: &LfactParams) -> Result<Var> {
        if let Some(k) = self.keys[i] {
            return Ok(k);
        }
        let k = tape.affine(params.v_q, u, params.b_q)?;
        self.keys[i] = Some(k);
        Ok(k)
    }
}

/// Attention-weighted transmission state for layer `layer` (1-based).
///
/// Returns `ū` and the attention weights.
pub fn transmission_state(
    tape: &Tape,
    primaries: &[Var],
    query: Var,
    layer: usize,
    params: &LfactParams,
    keys: &mut KeyCache,
) -> Result<(Var, Vec<f64>)> {
    if layer == 0 || layer > params.max_layers {
        return Err(Error::LayerRange {
            layer,
            max: params.max_layers,
        });
    }
    if primaries.is_empty() {
        return Err(Error::InvalidInput(
            "no primary states to attend over".into(),
        ));
    }
    let count = match params.strategy {
        Strategy::Ltd => primaries.len().min(layer),
        Strategy::All => primaries.len(),
    };
    if count == 1 {
        // softmax over one score is exactly 1
        return Ok((primaries[0], vec![1.0]));
    }
    let projection = tape.slice(params.v, layer - 1, layer)?;
    let q = tape.matmul(params.w_q, query)?;
    let mut scores = Vec::with_capacity(count);
    for (i, &u) in primaries[..count].iter().enumerate() {
        let k = keys.get(tape, i, u, params)?;
        let s = tape.sigmoid(tape.add(q, k)?)?;
        scores.push(tape.matmul(projection, s)?);
    }
    let beta = tape.concat(&scores)?;
    let alpha = tape.softmax(beta)?;
    let weights = tape.value(alpha).to_vec();
    let mut terms = Vec::with_capacity(count);
    for (i, &u) in primaries[..count].iter().enumerate() {
        let a = tape.pick(alpha, i)?;
        terms.push(tape.mul(a, u)?);
    }
    Ok((tape.add_all(&terms)?, weights))
}

/// One LFACT step over input `x` given the previous step's trace.
pub fn lfact_step(
    tape: &Tape,
    x: &Tensor,
    prev: &StepTrace,
    params: &LfactParams,
    epsilon: f64,
) -> Result<StepTrace> {
    let x = tape.constant(x.clone());
    let mut acc = HaltingAccumulator::new(epsilon, params.max_layers)?;
    let mut keys = KeyCache::new(prev.primaries.len());
    let mut primaries: Vec<Var> = Vec::new();
    let mut outputs = Vec::new();
    let mut transmission_used = Vec::new();
    let mut attention = Vec::new();
    let mut halts = Vec::new();
    loop {
        let layer = primaries.len() + 1;
        let query = match primaries.last() {
            Some(&u) => u,
            None => *prev.primaries.last().expect("non-empty trace"),
        };
        let (ubar, alpha) =
            transmission_state(tape, &prev.primaries, query, layer, params, &mut keys)?;
        let uhat = combine_g(tape, ubar, query, &params.combiner)?;
        let u = gru_step(tape, x, uhat, &params.cell)?;
        if let Some(head) = &params.head {
            outputs.push(head_forward(tape, u, head)?);
        }
        let wu = tape.matmul(params.w_h, u)?;
        let vu = tape.matmul(params.v_h, ubar)?;
        let pre = tape.add(tape.add(wu, vu)?, params.b_h)?;
        let h = tape.sigmoid(pre)?;
        primaries.push(u);
        transmission_used.push(ubar);
        attention.push(alpha);
        halts.push(h);
        if acc.push(tape.scalar(h))? {
            break;
        }
    }
    let record = acc.finish();
    let (_, remainder) = halting_distribution(tape, &halts, record.n_t)?;
    Ok(StepTrace {
        primaries,
        outputs,
        record,
        transmission_used,
        attention,
        remainder,
    })
}

/// Chains `lfact_step` from the initial zero trace.
pub fn run_sequence(
    tape: &Tape,
    inputs: &[Tensor],
    params: &LfactParams,
    hidden: usize,
    epsilon: f64,
) -> Result<Vec<StepTrace>> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("empty input sequence".into()));
    }
    let mut traces: Vec<StepTrace> = Vec::with_capacity(inputs.len());
    let initial = StepTrace::initial(tape, hidden);
    for x in inputs {
        let prev = traces.last().unwrap_or(&initial);
        let next = lfact_step(tape, x, prev, params, epsilon)?;
        traces.push(next);
    }
    Ok(traces)
}

/// Loss with intermediate-output supervision:
/// `task + τ·Σ_t P_t + μ·Σ_t Σ_{i=1..N_t} loss(o_t^i)`.
pub fn lfact_loss(
    task_loss: f64,
    intermediate_losses: &[Vec<f64>],
    records: &[HaltingRecord],
    tau: f64,
    mu: f64,
) -> f64 {
    let extra: f64 = intermediate_losses.iter().flatten().sum();
    crate::act::act_loss(task_loss, records, tau) + mu * extra
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Activation;

    fn store(d: usize, h: usize, l: usize, kind: CombinerKind, seed: u64) -> ParamStore {
        let mut rng = Rng::seeded(seed);
        let mut s = ParamStore::new();
        LfactParams::init(&mut s, "lfact", d, h, l, kind, &mut rng);
        HeadParams::init(&mut s, "head", h, 1, 3, &mut rng);
        s
    }

    fn bind(
        tape: &Tape,
        s: &ParamStore,
        kind: CombinerKind,
        strategy: Strategy,
        l: usize,
    ) -> LfactParams {
        let b = s.bind(tape);
        let head = HeadParams::bind(&b, "head", 1, 3, Activation::Softmax).unwrap();
        LfactParams::bind(&b, "lfact", Some(head), kind, strategy, l).unwrap()
    }

    #[test]
    fn combiner_examples() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::vector(&[v]));
        let m = |v: f64| tape.constant(Tensor::matrix(1, 1, &[v]).unwrap());
        let zero = Combiner::Affine {
            w1: m(0.0),
            w2: m(0.0),
            b: c(0.0),
        };
        let out = combine_g(&tape, c(3.0), c(-7.0), &zero).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5]);

        let cancel = Combiner::Affine {
            w1: m(1.0),
            w2: m(1.0),
            b: c(0.0),
        };
        let out = combine_g(&tape, c(2.0), c(-2.0), &cancel).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5]);

        let third = Combiner::Affine {
            w1: m(1.0),
            w2: m(0.0),
            b: c(0.0),
        };
        let out = combine_g(&tape, c(3f64.ln()), c(5.0), &third).unwrap();
        assert!((tape.value(out).data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mlp_combiner_with_zero_weights() {
        let s = store(2, 3, 2, CombinerKind::Mlp, 1).scaled(0.0);
        let tape = Tape::new();
        let p = bind(&tape, &s, CombinerKind::Mlp, Strategy::All, 2);
        let x = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let out = combine_g(&tape, x, x, &p.combiner).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5; 3]);
    }

    fn primaries(tape: &Tape) -> Vec<Var> {
        [[0.1, -0.2, 0.3], [0.9, 0.4, -0.5], [-0.6, 0.7, 0.2]]
            .iter()
            .map(|v| tape.constant(Tensor::vector(v)))
            .collect()
    }

    #[test]
    fn singleton_transmission_is_the_primary() {
        let s = store(2, 3, 3, CombinerKind::Affine, 2);
        for strategy in [Strategy::Ltd, Strategy::All] {
            let tape = Tape::new();
            let p = bind(&tape, &s, CombinerKind::Affine, strategy, 3);
            let prim = &primaries(&tape)[..1];
            for layer in 1..=3 {
                let (u, a) =
                    transmission_state(&tape, prim, prim[0], layer, &p, &mut KeyCache::new(1))
                        .unwrap();
                assert_eq!(u, prim[0]);
                assert_eq!(a, vec![1.0]);
            }
        }
    }

    #[test]
    fn limited_first_layer_uses_first_primary() {
        let s = store(2, 3, 3, CombinerKind::Affine, 3);
        let tape = Tape::new();
        let p = bind(&tape, &s, CombinerKind::Affine, Strategy::Ltd, 3);
        let prim = primaries(&tape);
        let (u, _) =
            transmission_state(&tape, &prim, prim[2], 1, &p, &mut KeyCache::new(3)).unwrap();
        assert_eq!(tape.value(u), tape.value(prim[0]));
    }

    #[test]
    fn zero_projection_gives_mean() {
        let mut s = store(2, 3, 3, CombinerKind::Affine, 4);
        s.insert("lfact.attn.v", Tensor::zeros(&[3, 3]));
        let tape = Tape::new();
        let p = bind(&tape, &s, CombinerKind::Affine, Strategy::All, 3);
        let prim = primaries(&tape);
        let (u, a) =
            transmission_state(&tape, &prim, prim[1], 2, &p, &mut KeyCache::new(3)).unwrap();
        assert_eq!(a, vec![1.0 / 3.0; 3]);
        let expected = [0.4 / 3.0, 0.9 / 3.0, 0.0];
        for (got, want) in tape.value(u).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_beyond_cap_is_rejected() {
        let s = store(2, 3, 2, CombinerKind::Affine, 5);
        let tape = Tape::new();
        let p = bind(&tape, &s, CombinerKind::Affine, Strategy::All, 2);
        let prim = primaries(&tape);
        assert!(matches!(
            transmission_state(&tape, &prim, prim[0], 3, &p, &mut KeyCache::new(3)),
            Err(Error::LayerRange { layer: 3, max: 2 })
        ));
    }

    #[test]
    fn step_output_is_deepest_layer() {
        let s = store(2, 4, 3, CombinerKind::Affine, 6);
        let tape = Tape::new();
        let p = bind(&tape, &s, CombinerKind::Affine, Strategy::All, 3);
        let inputs: Vec<Tensor> = (0..6)
            .map(|i| Tensor::vector(&[i as f64 * 0.3, -1.0]))
            .collect();
        let traces = run_sequence(&tape, &inputs, &p, 4, 0.01).unwrap();
        for t in &traces {
            assert_eq!(t.primaries.len(), t.record.n_t);
            assert_eq!(t.outputs.len(), t.record.n_t);
            assert_eq!(t.y(), t.outputs.last().unwrap().as_slice());
            t.record.validate(0.01, 3).unwrap();
        }
    }

    #[test]
    fn loss_examples() {
        let single = vec![HaltingRecord::single()];
        assert_eq!(
            lfact_loss(1.4, &[], &single, 0.06, 0.0),
            crate::act::act_loss(1.4, &single, 0.06)
        );
        let two = HaltingRecord {
            h_values: vec![0.5, 0.7],
            n_t: 2,
            p: vec![0.5, 0.5],
            remainder: 0.5,
        };
        let l = lfact_loss(1.0, &[vec![0.5, 0.3]], &[two], 0.0, 0.1);
        assert!((l - 1.08).abs() < 1e-15);
    }
}
