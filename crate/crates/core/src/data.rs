//! Datasets: byte corpora and deterministic synthetic tasks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Bytes,
    Modsum,
    Market,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Bytes => "bytes",
            Task::Modsum => "modsum",
            Task::Market => "market",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bytes" => Some(Task::Bytes),
            "modsum" => Some(Task::Modsum),
            "market" => Some(Task::Market),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One training example.
///
/// In per-step mode `targets[t]` belongs to `inputs[t]`. In encoder-decoder
/// mode `inputs` feed the encoder, every decoder step receives
/// `decoder_input`, and `targets[k]` is the label of decoder step `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Tensor>,
    /// Per step, one class index per head.
    pub targets: Vec<Vec<usize>>,
    pub decoder_input: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub split: Split,
    pub input_dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits every sample of length `encoder_len + k` into an encoder part,
    /// a constant decoder input, and `k` decoder targets.
    ///
    /// The decoder input is `inputs[encoder_len]`, the input-space encoding
    /// of the final encoder step's ground truth.
    pub fn to_seq2seq(&self, encoder_len: usize) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            if encoder_len == 0 || s.inputs.len() <= encoder_len {
                return Err(Error::Data(format!(
                    "sequence of length {} cannot hold {encoder_len} encoder steps plus a decoder",
                    s.inputs.len()
                )));
            }
            samples.push(Sample {
                inputs: s.inputs[..encoder_len].to_vec(),
                targets: s.targets[encoder_len..].to_vec(),
                decoder_input: Some(s.inputs[encoder_len].clone()),
            });
        }
        Ok(Dataset {
            samples,
            ..self.clone()
        })
    }

    /// Tab-separated export, one sample per line:
    /// `index \t inputs \t targets`, where steps are separated by `;` and
    /// values within a step by `,`. Byte and modsum steps are written as
    /// integers (`byte`, `digit,difficulty`), market steps as returns.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let mut steps: Vec<String> = s.inputs.iter().map(|x| self.encode_input(x)).collect();
            if let Some(d) = &s.decoder_input {
                steps.push(format!("|{}", self.encode_input(d)));
            }
            let targets: Vec<String> = s.targets.iter().map(|t| join(t.iter())).collect();
            let _ = writeln!(out, "{i}\t{}\t{}", steps.join(";"), targets.join(";"));
        }
        out
    }

    fn encode_input(&self, x: &Tensor) -> String {
        match self.task {
            Task::Bytes => x.argmax().to_string(),
            Task::Modsum => {
                let d = x.data()[MODSUM_DIGITS];
                format!(
                    "{},{}",
                    Tensor::vector(&x.data()[..MODSUM_DIGITS]).argmax(),
                    d as u32
                )
            }
            Task::Market => join(x.data().iter()),
        }
    }
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

pub const BYTE_VOCAB: usize = 256;

/// Random non-overlapping windows of `seq_len + 1` bytes.
///
/// Window `w` covers bytes `w·(seq_len+1) .. (w+1)·(seq_len+1)`; the input
/// is the one-hot encoding of its first `seq_len` bytes and the target at
/// step `t` is byte `t + 1`. No window appears in two splits.
pub fn byte_datasets(
    bytes: &[u8],
    seq_len: usize,
    counts: SplitCounts,
    rng: &mut Rng,
) -> Result<[Dataset; 3]> {
    let (sets, _) = byte_datasets_with_windows(bytes, seq_len, counts, rng)?;
    Ok(sets)
}

/// As [`byte_datasets`], also returning the window indices of each split.
pub fn byte_datasets_with_windows(
    bytes: &[u8],
    seq_len: usize,
    counts: SplitCounts,
    rng: &mut Rng,
) -> Result<([Dataset; 3], [Vec<usize>; 3])> {
    if seq_len == 0 {
        return Err(Error::Data("seq_len must be at least 1".into()));
    }
    let width = seq_len + 1;
    let need = width * counts.total();
    if bytes.len() < need {
        return Err(Error::Data(format!(
            "corpus has {} bytes, need at least {need}",
            bytes.len()
        )));
    }
    let mut windows: Vec<usize> = (0..bytes.len() / width).collect();
    rng.shuffle(&mut windows);
    let mut offset = 0;
    let mut take = |n: usize| {
        let w = windows[offset..offset + n].to_vec();
        offset += n;
        w
    };
    let picks = [take(counts.train), take(counts.val), take(counts.test)];
    let build = |split: Split, ws: &[usize]| Dataset {
        task: Task::Bytes,
        split,
        input_dim: BYTE_VOCAB,
        heads: 1,
        classes: BYTE_VOCAB,
        samples: ws
            .iter()
            .map(|&w| {
                let chunk = &bytes[w * width..(w + 1) * width];
                Sample {
                    inputs: chunk[..seq_len]
                        .iter()
                        .map(|&b| Tensor::one_hot(BYTE_VOCAB, b as usize))
                        .collect(),
                    targets: chunk[1..].iter().map(|&b| vec![b as usize]).collect(),
                    decoder_input: None,
                }
            })
            .collect(),
    };
    let sets = [
        build(Split::Train, &picks[0]),
        build(Split::Val, &picks[1]),
        build(Split::Test, &picks[2]),
    ];
    Ok((sets, picks))
}

/// Reads a corpus file and cuts it into train/val/test windows.
pub fn load_byte_corpus(
    path: &Path,
    seq_len: usize,
    counts: SplitCounts,
    rng: &mut Rng,
) -> Result<[Dataset; 3]> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let need = (seq_len + 1) * counts.total();
    if bytes.len() < need {
        return Err(Error::CorpusTooSmall {
            path: path.to_path_buf(),
            have: bytes.len(),
            need,
        });
    }
    byte_datasets(&bytes, seq_len, counts, rng)
}

pub const MODSUM_DIGITS: usize = 10;
pub const MODSUM_SEGMENT: usize = 5;
pub const MODSUM_DIFFICULTIES: [usize; 3] = [1, 3, 5];

/// Difficulty channel of a modsum input step.
pub fn modsum_difficulty(x: &Tensor) -> usize {
    x.data()[MODSUM_DIGITS] as usize
}

/// Running modular sums over a difficulty-dependent window.
///
/// Step `t` carries a random digit and a difficulty `d_t ∈ {1, 3, 5}` that
/// is constant over segments of five steps. Its target is the sum of the
/// last `d_t` digits (fewer at the start of the sequence) modulo 10.
pub fn gen_modsum(
    rng: &mut Rng,
    n_samples: usize,
    seq_len: usize,
    split: Split,
) -> Result<Dataset> {
    if seq_len < MODSUM_SEGMENT {
        return Err(Error::Data(format!(
            "modsum needs seq_len >= {MODSUM_SEGMENT}"
        )));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let digits: Vec<usize> = (0..seq_len).map(|_| rng.below(10) as usize).collect();
        let segments = seq_len.div_ceil(MODSUM_SEGMENT);
        let seg_d: Vec<usize> = (0..segments)
            .map(|_| MODSUM_DIFFICULTIES[rng.below(3) as usize])
            .collect();
        let mut inputs = Vec::with_capacity(seq_len);
        let mut targets = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let d = seg_d[t / MODSUM_SEGMENT];
            let mut x = vec![0.0; MODSUM_DIGITS + 1];
            x[digits[t]] = 1.0;
            x[MODSUM_DIGITS] = d as f64;
            inputs.push(Tensor::vector(&x));
            let start = (t + 1).saturating_sub(d);
            targets.push(vec![digits[start..=t].iter().sum::<usize>() % 10]);
        }
        samples.push(Sample {
            inputs,
            targets,
            decoder_input: None,
        });
    }
    Ok(Dataset {
        task: Task::Modsum,
        split,
        input_dim: MODSUM_DIGITS + 1,
        heads: 1,
        classes: 10,
        samples,
    })
}

pub const MARKET_CHANNELS: usize = 22;
pub const MARKET_CLASSES: usize = 5;
pub const MARKET_AR: f64 = 0.3;

/// Five σ-buckets: `z < -2`, `[-2, -1)`, `[-1, 1]`, `(1, 2]`, `z > 2`.
pub fn market_bucket(z: f64) -> usize {
    if z < -2.0 {
        0
    } else if z < -1.0 {
        1
    } else if z <= 1.0 {
        2
    } else if z <= 2.0 {
        3
    } else {
        4
    }
}

/// Synthetic multi-channel return series with 5-class movement labels.
///
/// Each channel follows `r_t = 0.3 r_{t-1} + η_t` with standard normal
/// noise, started from its stationary distribution. The input at step `t`
/// is the vector of all channels' `r_t`; the label of channel `c` at step
/// `t` buckets `r_{t+1} / σ` where `σ = 1/sqrt(1 - 0.3²)`.
pub fn gen_market_surrogate(
    rng: &mut Rng,
    n_samples: usize,
    seq_len: usize,
    channels: usize,
    split: Split,
) -> Result<Dataset> {
    if channels == 0 || seq_len == 0 {
        return Err(Error::Data(
            "market surrogate needs channels >= 1 and seq_len >= 1".into(),
        ));
    }
    let sigma = 1.0 / (1.0 - MARKET_AR * MARKET_AR).sqrt();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        // series[c][t] for t = 0..=seq_len + 1
        let series: Vec<Vec<f64>> = (0..channels)
            .map(|_| {
                let mut r = vec![sigma * rng.normal()];
                for t in 1..=seq_len + 1 {
                    let next = MARKET_AR * r[t - 1] + rng.normal();
                    r.push(next);
                }
                r
            })
            .collect();
        let inputs = (1..=seq_len)
            .map(|t| Tensor::vector(&series.iter().map(|s| s[t]).collect::<Vec<_>>()))
            .collect();
        let targets = (1..=seq_len)
            .map(|t| {
                series
                    .iter()
                    .map(|s| market_bucket(s[t + 1] / sigma))
                    .collect()
            })
            .collect();
        samples.push(Sample {
            inputs,
            targets,
            decoder_input: None,
        });
    }
    Ok(Dataset {
        task: Task::Market,
        split,
        input_dim: channels,
        heads: channels,
        classes: MARKET_CLASSES,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_byte_window() {
        let counts = SplitCounts {
            train: 1,
            val: 0,
            test: 0,
        };
        let [train, _, _] = byte_datasets(b"ab", 1, counts, &mut Rng::seeded(0)).unwrap();
        let s = &train.samples[0];
        assert_eq!(s.inputs, vec![Tensor::one_hot(256, b'a' as usize)]);
        assert_eq!(s.targets, vec![vec![b'b' as usize]]);
    }

    #[test]
    fn byte_splits_are_disjoint_and_deterministic() {
        let corpus: Vec<u8> = (0..5000u32).map(|i| (i * 7 % 251) as u8).collect();
        let counts = SplitCounts {
            train: 40,
            val: 10,
            test: 10,
        };
        let (a, wa) = byte_datasets_with_windows(&corpus, 20, counts, &mut Rng::seeded(5)).unwrap();
        let (b, wb) = byte_datasets_with_windows(&corpus, 20, counts, &mut Rng::seeded(5)).unwrap();
        assert_eq!(wa, wb);
        assert_eq!(a[0].samples, b[0].samples);
        let mut all: Vec<usize> = wa.iter().flatten().copied().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn small_corpus_reports_required_size() {
        let counts = SplitCounts {
            train: 10,
            val: 2,
            test: 2,
        };
        let err = byte_datasets(&[0u8; 100], 50, counts, &mut Rng::seeded(0)).unwrap_err();
        assert!(err.to_string().contains("714"), "{err}");
    }

    #[test]
    fn modsum_targets() {
        let ds = gen_modsum(&mut Rng::seeded(3), 20, 15, Split::Train).unwrap();
        for s in &ds.samples {
            for (t, x) in s.inputs.iter().enumerate() {
                if modsum_difficulty(x) == 1 {
                    assert_eq!(s.targets[t][0], Tensor::vector(&x.data()[..10]).argmax());
                }
            }
        }
        let again = gen_modsum(&mut Rng::seeded(3), 20, 15, Split::Train).unwrap();
        assert_eq!(ds.samples, again.samples);
    }

    #[test]
    fn modsum_window_example() {
        // digits [2, 3, 4] with d = 3 at the third step: (2 + 3 + 4) mod 10
        let digits = [2usize, 3, 4];
        let t = 2;
        let start = (t + 1usize).saturating_sub(3);
        assert_eq!(digits[start..=t].iter().sum::<usize>() % 10, 9);
    }

    #[test]
    fn market_buckets() {
        assert_eq!(market_bucket(0.0), 2);
        assert_eq!(market_bucket(1.5), 3);
        assert_eq!(market_bucket(-1.5), 1);
        assert_eq!(market_bucket(2.5), 4);
        assert_eq!(market_bucket(-3.0), 0);
        assert_eq!(market_bucket(1.0), 2);
    }

    #[test]
    fn market_shape() {
        let ds =
            gen_market_surrogate(&mut Rng::seeded(1), 3, 20, MARKET_CHANNELS, Split::Val).unwrap();
        assert_eq!(ds.heads, 22);
        assert_eq!(ds.classes, 5);
        for s in &ds.samples {
            assert_eq!(s.inputs.len(), 20);
            assert_eq!(s.targets.len(), 20);
            assert!(s.inputs.iter().all(|x| x.len() == 22));
            assert!(s.targets.iter().flatten().all(|&c| c < 5));
        }
    }

    #[test]
    fn seq2seq_split_uses_next_input_as_decoder_input() {
        let ds = gen_market_surrogate(&mut Rng::seeded(2), 2, 30, 3, Split::Train).unwrap();
        let s2s = ds.to_seq2seq(20).unwrap();
        for (a, b) in ds.samples.iter().zip(&s2s.samples) {
            assert_eq!(b.inputs.len(), 20);
            assert_eq!(b.targets.len(), 10);
            assert_eq!(b.decoder_input.as_ref(), Some(&a.inputs[20]));
            assert_eq!(b.targets[0], a.targets[20]);
        }
        assert!(ds.to_seq2seq(30).is_err());
    }

    #[test]
    fn export_format() {
        let ds = gen_modsum(&mut Rng::seeded(4), 2, 5, Split::Train).unwrap();
        let text = ds.export();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let fields: Vec<&str> = lines[0].split('\t').collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[1].split(';').count(), 5);
        assert_eq!(fields[2].split(';').count(), 5);
    }
}
