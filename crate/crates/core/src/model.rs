//! Model assembly: parameter layout, cell dispatch, and per-sample loss.

use serde::{Deserialize, Serialize};

use crate::act::{act_step, ActParams, HaltingRecord, DEFAULT_EPSILON};
use crate::cells::{gru_step, head_forward, head_loss, Activation, GruParams, HeadParams};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::lfact::{lfact_step, CombinerKind, LfactParams, StepTrace, Strategy};
use crate::numeric::{
    grad_check_pinned, BoundParams, GradCheckReport, ParamStore, Rng, Tape, Tensor, Var,
};
use crate::seq2seq::{decode, encode, run_rnn_mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rnn,
    Act,
    Lfact,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Act => "act",
            ModelKind::Lfact => "lfact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rnn" => Some(ModelKind::Rnn),
            "act" => Some(ModelKind::Act),
            "lfact" => Some(ModelKind::Lfact),
            _ => None,
        }
    }
}

/// Architecture of a model; everything needed to lay out and run its
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub classes: usize,
    pub max_layers: usize,
    pub epsilon: f64,
    pub strategy: Strategy,
    pub combiner: CombinerKind,
    /// `Some(k)` for encoder-decoder mode with `k` decoder steps.
    pub decoder_len: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Ponder-cost weight.
    pub tau: f64,
    /// Weight of the intermediate-output losses (LFACT, per-step mode only).
    pub mu: f64,
}

pub enum BoundCell {
    Rnn {
        cell: GruParams,
        head: Option<HeadParams>,
    },
    Act {
        params: ActParams,
        epsilon: f64,
        max_layers: usize,
    },
    Lfact {
        params: LfactParams,
        epsilon: f64,
    },
}

pub enum CellState {
    Hidden(Var),
    Trace(StepTrace),
}

impl CellState {
    /// Primary states carried to the next step.
    pub fn primaries(&self) -> &[Var] {
        match self {
            CellState::Hidden(v) => std::slice::from_ref(v),
            CellState::Trace(t) => &t.primaries,
        }
    }
}

/// Output of one step of any cell kind.
pub struct StepOut {
    /// Step output per head; empty for cells without a head.
    pub y: Vec<Var>,
    /// Outputs of every layer (LFACT only; empty otherwise).
    pub layer_outputs: Vec<Vec<Var>>,
    pub record: HaltingRecord,
    /// Remainder of halting cells.
    pub remainder: Option<Var>,
}

impl BoundCell {
    fn hidden(&self, tape: &Tape) -> usize {
        let u = match self {
            BoundCell::Rnn { cell, .. } => cell.u_z,
            BoundCell::Act { params, .. } => params.cell.u_z,
            BoundCell::Lfact { params, .. } => params.cell.u_z,
        };
        tape.value(u).shape()[0]
    }

    pub fn initial_state(&self, tape: &Tape) -> CellState {
        let hidden = self.hidden(tape);
        match self {
            BoundCell::Lfact { .. } => CellState::Trace(StepTrace::initial(tape, hidden)),
            _ => CellState::Hidden(tape.constant(Tensor::zeros(&[hidden]))),
        }
    }

    pub fn step(&self, tape: &Tape, x: &Tensor, state: &CellState) -> Result<(StepOut, CellState)> {
        match (self, state) {
            (BoundCell::Rnn { cell, head }, CellState::Hidden(h)) => {
                let xv = tape.constant(x.clone());
                let u = gru_step(tape, xv, *h, cell)?;
                let y = match head {
                    Some(p) => head_forward(tape, u, p)?,
                    None => vec![],
                };
                let out = StepOut {
                    y,
                    layer_outputs: vec![],
                    record: HaltingRecord::single(),
                    remainder: None,
                };
                Ok((out, CellState::Hidden(u)))
            }
            (
                BoundCell::Act {
                    params,
                    epsilon,
                    max_layers,
                },
                CellState::Hidden(h),
            ) => {
                let s = act_step(tape, x, *h, params, *epsilon, *max_layers)?;
                let out = StepOut {
                    y: s.outputs,
                    layer_outputs: vec![],
                    record: s.record,
                    remainder: Some(s.remainder),
                };
                Ok((out, CellState::Hidden(s.state)))
            }
            (BoundCell::Lfact { params, epsilon }, CellState::Trace(prev)) => {
                let t = lfact_step(tape, x, prev, params, *epsilon)?;
                let out = StepOut {
                    y: t.y().to_vec(),
                    layer_outputs: t.outputs.clone(),
                    record: t.record.clone(),
                    remainder: Some(t.remainder),
                };
                Ok((out, CellState::Trace(t)))
            }
            _ => Err(Error::InvalidInput(
                "cell state does not match cell kind".into(),
            )),
        }
    }
}

/// Model weights bound to a tape.
pub struct BoundModel {
    /// The per-step cell, or the encoder in encoder-decoder mode.
    pub encoder: BoundCell,
    pub decoder: Option<BoundCell>,
}

/// Everything a single sample produces.
pub struct SampleRun {
    pub loss: Var,
    /// One entry per predicted step, one probability vector per head.
    pub predictions: Vec<Vec<Var>>,
    /// One record per executed step (encoder and decoder).
    pub records: Vec<HaltingRecord>,
}

/// Concrete results of a sample, detached from any tape.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub loss: f64,
    pub predictions: Vec<Vec<Tensor>>,
    pub records: Vec<HaltingRecord>,
    pub grads: Option<ParamStore>,
}

impl ModelSpec {
    /// Spec with the common defaults: `L = 3`, `ε = 0.01`, attention over all
    /// layers, affine combiner, per-step mode.
    pub fn new(
        kind: ModelKind,
        input_dim: usize,
        hidden: usize,
        heads: usize,
        classes: usize,
    ) -> Self {
        Self {
            kind,
            input_dim,
            hidden,
            heads,
            classes,
            max_layers: 3,
            epsilon: DEFAULT_EPSILON,
            strategy: Strategy::All,
            combiner: CombinerKind::Affine,
            decoder_len: None,
        }
    }

    fn prefixes(&self) -> (&'static str, Option<&'static str>) {
        match self.decoder_len {
            None => ("core", None),
            Some(_) => ("enc", Some("dec")),
        }
    }

    fn init_cell(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        let (d, h) = (self.input_dim, self.hidden);
        match self.kind {
            ModelKind::Rnn => GruParams::init(store, &format!("{prefix}.cell"), d, h, rng),
            ModelKind::Act => ActParams::init(store, prefix, d, h, rng),
            ModelKind::Lfact => {
                LfactParams::init(store, prefix, d, h, self.max_layers, self.combiner, rng)
            }
        }
    }

    /// Fresh parameters: Glorot weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        let (enc, dec) = self.prefixes();
        self.init_cell(&mut store, enc, rng);
        if let Some(dec) = dec {
            self.init_cell(&mut store, dec, rng);
        }
        HeadParams::init(
            &mut store,
            "head",
            self.hidden,
            self.heads,
            self.classes,
            rng,
        );
        store
    }

    fn bind_cell(
        &self,
        bound: &BoundParams,
        prefix: &str,
        head: Option<HeadParams>,
    ) -> Result<BoundCell> {
        Ok(match self.kind {
            ModelKind::Rnn => BoundCell::Rnn {
                cell: GruParams::bind(bound, &format!("{prefix}.cell"))?,
                head,
            },
            ModelKind::Act => BoundCell::Act {
                params: ActParams::bind(bound, prefix, head)?,
                epsilon: self.epsilon,
                max_layers: self.max_layers,
            },
            ModelKind::Lfact => BoundCell::Lfact {
                params: LfactParams::bind(
                    bound,
                    prefix,
                    head,
                    self.combiner,
                    self.strategy,
                    self.max_layers,
                )?,
                epsilon: self.epsilon,
            },
        })
    }

    pub fn bind(&self, bound: &BoundParams) -> Result<BoundModel> {
        let head = HeadParams::bind(bound, "head", self.heads, self.classes, Activation::Softmax)?;
        let (enc, dec) = self.prefixes();
        Ok(match dec {
            None => BoundModel {
                encoder: self.bind_cell(bound, enc, Some(head))?,
                decoder: None,
            },
            Some(dec) => BoundModel {
                encoder: self.bind_cell(bound, enc, None)?,
                decoder: Some(self.bind_cell(bound, dec, Some(head))?),
            },
        })
    }

    /// Checks that a dataset fits this architecture.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        for (what, mine, theirs) in [
            ("input_dim", self.input_dim, data.input_dim),
            ("heads", self.heads, data.heads),
            ("classes", self.classes, data.classes),
        ] {
            if mine != theirs {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    checkpoint: mine,
                    requested: theirs,
                });
            }
        }
        Ok(())
    }

    /// Checks that a parameter store has exactly this spec's layout.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let reference = self.init_params(&mut Rng::seeded(0));
        for (name, t) in reference.iter() {
            let Some(p) = params.get(name) else {
                return Err(Error::InvalidInput(format!("parameter {name} missing")));
            };
            if p.shape() != t.shape() {
                let axis = (0..t.rank())
                    .find(|&i| p.shape().get(i) != Some(&t.shape()[i]))
                    .unwrap_or(0);
                return Err(Error::DimensionMismatch {
                    what: format!("{name} axis {axis}"),
                    checkpoint: p.shape().get(axis).copied().unwrap_or(0),
                    requested: t.shape()[axis],
                });
            }
        }
        if params.len() != reference.len() {
            return Err(Error::InvalidInput(format!(
                "parameter count {} differs from expected {}",
                params.len(),
                reference.len()
            )));
        }
        Ok(())
    }

    /// Records the forward pass and loss of one sample.
    ///
    /// Per-step mode: `(1/T) Σ_t [CE(y_t) + τ P_t + μ Σ_{i≤N_t} CE(o_t^i)]`,
    /// with the μ term only for LFACT. Encoder-decoder mode: ponder cost over
    /// every encoder and decoder step plus CE over decoder steps, divided by
    /// the decoder length.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        sample: &Sample,
        loss: LossConfig,
    ) -> Result<SampleRun> {
        let model = self.bind(bound)?;
        let (steps, predicted_from) = match (&model.decoder, self.decoder_len) {
            (None, _) => {
                if sample.targets.len() != sample.inputs.len() {
                    return Err(Error::InvalidInput(format!(
                        "{} inputs but {} targets",
                        sample.inputs.len(),
                        sample.targets.len()
                    )));
                }
                (run_rnn_mode(tape, &model.encoder, &sample.inputs)?, 0)
            }
            (Some(decoder), Some(k)) => {
                let last_gt = sample
                    .decoder_input
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("sample has no decoder input".into()))?;
                if sample.targets.len() != k {
                    return Err(Error::InvalidInput(format!(
                        "decoder length {k} but {} targets",
                        sample.targets.len()
                    )));
                }
                let (mut enc, state) = encode(tape, &model.encoder, &sample.inputs)?;
                let n_enc = enc.len();
                enc.extend(decode(tape, decoder, state, last_gt, k)?);
                (enc, n_enc)
            }
            (Some(_), None) => unreachable!("decoder without length"),
        };

        let with_mu = self.kind == ModelKind::Lfact && self.decoder_len.is_none() && loss.mu != 0.0;
        let mut terms = Vec::new();
        let mut predictions = Vec::new();
        for (out, targets) in steps[predicted_from..].iter().zip(&sample.targets) {
            let ce = head_loss(tape, &out.y, targets, Activation::Softmax)?;
            terms.push(ce);
            if with_mu {
                let n = out.layer_outputs.len();
                let mut inner = Vec::with_capacity(n);
                for o in &out.layer_outputs[..n - 1] {
                    inner.push(head_loss(tape, o, targets, Activation::Softmax)?);
                }
                inner.push(ce);
                let s = tape.add_all(&inner)?;
                terms.push(tape.scale(s, loss.mu)?);
            }
            predictions.push(out.y.clone());
        }
        if self.kind != ModelKind::Rnn && loss.tau != 0.0 {
            let rounds: usize = steps.iter().map(|s| s.record.n_t).sum();
            let remainders: Vec<Var> = steps.iter().filter_map(|s| s.remainder).collect();
            let total_r = tape.add_all(&remainders)?;
            let rounds = tape.constant(Tensor::scalar(rounds as f64));
            let ponder = tape.add(rounds, total_r)?;
            terms.push(tape.scale(ponder, loss.tau)?);
        }
        let total = tape.add_all(&terms)?;
        let loss_var = tape.scale(total, 1.0 / sample.targets.len() as f64)?;
        Ok(SampleRun {
            loss: loss_var,
            predictions,
            records: steps.into_iter().map(|s| s.record).collect(),
        })
    }

    /// Loss plus the per-step round counts, for pinned gradient checks.
    pub fn loss_with_pattern(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        sample: &Sample,
        loss: LossConfig,
    ) -> Result<(Var, Vec<usize>)> {
        let run = self.forward(tape, bound, sample, loss)?;
        Ok((run.loss, run.records.iter().map(|r| r.n_t).collect()))
    }

    /// Evaluates one sample on a private tape, optionally with gradients.
    pub fn run_sample(
        &self,
        params: &ParamStore,
        sample: &Sample,
        loss: LossConfig,
        with_grads: bool,
    ) -> Result<SampleResult> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let run = self.forward(&tape, &bound, sample, loss)?;
        let grads = if with_grads {
            let g = tape.backward(run.loss)?;
            Some(bound.gradients(&g)?)
        } else {
            None
        };
        Ok(SampleResult {
            loss: tape.scalar(run.loss),
            predictions: run
                .predictions
                .iter()
                .map(|heads| heads.iter().map(|&v| tape.value(v)).collect())
                .collect(),
            records: run.records,
            grads,
        })
    }
}

/// Tiny model used for gradient checks: `H = 8`, `L = 3`, three steps, two
/// heads of three classes over four-dimensional Gaussian inputs.
pub struct TinyCheck {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub sample: Sample,
    pub loss: LossConfig,
}

impl TinyCheck {
    /// Weights are drawn at twice the Glorot scale and biases from
    /// `N(0, 0.25)`. At zero biases the attention-query gradients are second
    /// order small and sink below finite-difference resolution.
    pub fn new(kind: ModelKind, strategy: Strategy, combiner: CombinerKind, seed: u64) -> Self {
        let mut spec = ModelSpec::new(kind, 4, 8, 2, 3);
        spec.strategy = strategy;
        spec.combiner = combiner;
        let mut rng = Rng::derived(seed, 1);
        let mut params = ParamStore::new();
        for (name, t) in spec.init_params(&mut Rng::derived(seed, 0)).iter() {
            let t = if t.rank() == 1 {
                t.map(|_| 0.5 * rng.normal())
            } else {
                t.map(|x| 2.0 * x)
            };
            params.insert(name, t);
        }
        let sample = Sample {
            inputs: (0..3).map(|_| t4(&mut rng)).collect(),
            targets: (0..3)
                .map(|_| vec![rng.below(3) as usize, rng.below(3) as usize])
                .collect(),
            decoder_input: None,
        };
        Self {
            spec,
            params,
            sample,
            loss: LossConfig { tau: 0.01, mu: 0.1 },
        }
    }

    pub fn run(&self, step: f64) -> Result<GradCheckReport> {
        grad_check_pinned(
            |t: &Tape, b: &BoundParams| self.spec.loss_with_pattern(t, b, &self.sample, self.loss),
            &self.params,
            step,
        )
    }
}

fn t4(rng: &mut Rng) -> Tensor {
    Tensor::vector(&[rng.normal(), rng.normal(), rng.normal(), rng.normal()])
}
