//! Per-step and encoder-decoder drivers over any cell kind.

use crate::error::{Error, Result};
use crate::model::{BoundCell, CellState, StepOut};
use crate::numeric::{Tape, Tensor};

/// Encoder/decoder lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seq2SeqConfig {
    pub encoder_len: usize,
    pub decoder_len: usize,
}

impl Seq2SeqConfig {
    pub fn new(encoder_len: usize, decoder_len: usize) -> Result<Self> {
        if encoder_len == 0 {
            return Err(Error::InvalidInput("encoder_len must be at least 1".into()));
        }
        Ok(Self {
            encoder_len,
            decoder_len,
        })
    }
}

fn chain<'a>(
    tape: &Tape,
    cell: &BoundCell,
    inputs: impl Iterator<Item = &'a Tensor>,
    mut state: CellState,
) -> Result<(Vec<StepOut>, CellState)> {
    let mut outs = Vec::new();
    for x in inputs {
        let (out, next) = cell.step(tape, x, &state)?;
        outs.push(out);
        state = next;
    }
    Ok((outs, state))
}

/// Runs the encoder over `inputs`; returns per-step halting output and the
/// final state.
pub fn encode(
    tape: &Tape,
    cell: &BoundCell,
    inputs: &[Tensor],
) -> Result<(Vec<StepOut>, CellState)> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput(
            "encoder needs at least one input".into(),
        ));
    }
    chain(tape, cell, inputs.iter(), cell.initial_state(tape))
}

/// Runs `steps` decoder steps, each fed the same `last_gt` vector.
pub fn decode(
    tape: &Tape,
    cell: &BoundCell,
    state: CellState,
    last_gt: &Tensor,
    steps: usize,
) -> Result<Vec<StepOut>> {
    if steps == 0 {
        return Err(Error::InvalidInput(
            "decoder needs at least one step".into(),
        ));
    }
    Ok(chain(tape, cell, std::iter::repeat_n(last_gt, steps), state)?.0)
}

/// One prediction per input step.
pub fn run_rnn_mode(tape: &Tape, cell: &BoundCell, inputs: &[Tensor]) -> Result<Vec<StepOut>> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("empty input sequence".into()));
    }
    Ok(chain(tape, cell, inputs.iter(), cell.initial_state(tape))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ModelSpec};
    use crate::numeric::Rng;

    fn spec(kind: ModelKind, seq2seq: Option<usize>) -> ModelSpec {
        let mut s = ModelSpec::new(kind, 3, 6, 2, 4);
        s.max_layers = 3;
        s.decoder_len = seq2seq;
        s
    }

    fn inputs(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = Rng::seeded(seed);
        (0..n)
            .map(|_| Tensor::vector(&[rng.normal(), rng.normal(), rng.normal()]))
            .collect()
    }

    #[test]
    fn rnn_mode_is_causal() {
        for kind in [ModelKind::Rnn, ModelKind::Act, ModelKind::Lfact] {
            let spec = spec(kind, None);
            let params = spec.init_params(&mut Rng::seeded(1));
            let xs = inputs(12, 2);
            let full = {
                let tape = Tape::new();
                let m = spec.bind(&params.bind(&tape)).unwrap();
                let outs = run_rnn_mode(&tape, &m.encoder, &xs).unwrap();
                outs.iter().map(|o| tape.value(o.y[0])).collect::<Vec<_>>()
            };
            assert_eq!(full.len(), 12);
            for k in [1, 5, 11] {
                let tape = Tape::new();
                let m = spec.bind(&params.bind(&tape)).unwrap();
                let outs = run_rnn_mode(&tape, &m.encoder, &xs[..k]).unwrap();
                for (o, f) in outs.iter().zip(&full) {
                    assert!(tape.value(o.y[0]).bitwise_eq(f));
                }
            }
        }
    }

    #[test]
    fn single_step_encoder_equals_one_step() {
        let spec = spec(ModelKind::Lfact, Some(3));
        let params = spec.init_params(&mut Rng::seeded(4));
        let xs = inputs(1, 5);
        let tape = Tape::new();
        let m = spec.bind(&params.bind(&tape)).unwrap();
        let (_, state) = encode(&tape, &m.encoder, &xs).unwrap();
        let (_, direct) = m
            .encoder
            .step(&tape, &xs[0], &m.encoder.initial_state(&tape))
            .unwrap();
        let a: Vec<_> = state.primaries().iter().map(|&v| tape.value(v)).collect();
        let b: Vec<_> = direct.primaries().iter().map(|&v| tape.value(v)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_sees_constant_input_and_is_deterministic() {
        for kind in [ModelKind::Rnn, ModelKind::Act, ModelKind::Lfact] {
            let spec = spec(kind, Some(5));
            let params = spec.init_params(&mut Rng::seeded(8));
            let xs = inputs(20, 9);
            let gt = Tensor::vector(&[0.5, -0.5, 0.1]);
            let run = || {
                let tape = Tape::new();
                let m = spec.bind(&params.bind(&tape)).unwrap();
                let (_, state) = encode(&tape, &m.encoder, &xs).unwrap();
                let dec = m.decoder.as_ref().unwrap();
                let outs = decode(&tape, dec, state, &gt, 5).unwrap();
                assert_eq!(outs.len(), 5);
                outs.iter()
                    .map(|o| tape.value(o.y[1]).to_vec())
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn rejects_empty_inputs() {
        let spec = spec(ModelKind::Act, Some(2));
        let params = spec.init_params(&mut Rng::seeded(0));
        let tape = Tape::new();
        let m = spec.bind(&params.bind(&tape)).unwrap();
        assert!(encode(&tape, &m.encoder, &[]).is_err());
        let s = m.encoder.initial_state(&tape);
        assert!(decode(
            &tape,
            m.decoder.as_ref().unwrap(),
            s,
            &Tensor::zeros(&[3]),
            0
        )
        .is_err());
        assert!(Seq2SeqConfig::new(0, 3).is_err());
    }
}
