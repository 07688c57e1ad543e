//! Run configuration: flat `dotted.key = value` text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{
    gen_market_surrogate, gen_modsum, load_byte_corpus, Dataset, Split, SplitCounts, Task,
    MARKET_CHANNELS,
};
use crate::error::{Error, Result};
use crate::lfact::{CombinerKind, Strategy};
use crate::model::{LossConfig, ModelKind, ModelSpec};
use crate::numeric::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Rnn,
    Seq2Seq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub max_layers: usize,
    pub epsilon: f64,
    pub strategy: Strategy,
    pub combiner: CombinerKind,
    pub mode: Mode,
    pub decoder_len: usize,
    pub tau: f64,
    pub mu: f64,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub task: Task,
    pub path: Option<String>,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

const KEYS: &[&str] = &[
    "model.kind",
    "model.hidden",
    "model.max_layers",
    "model.epsilon",
    "model.strategy",
    "model.combiner",
    "mode",
    "seq2seq.decoder_len",
    "loss.tau",
    "loss.mu",
    "optim.lr",
    "optim.batch",
    "optim.clip",
    "data.task",
    "data.path",
    "data.seq_len",
    "data.train",
    "data.val",
    "data.test",
    "train.epochs",
    "train.patience",
    "seed",
];

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("{key}: invalid value {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

impl RunConfig {
    /// Defaults for a task; every other key falls back to these.
    pub fn defaults(task: Task) -> Self {
        let (max_layers, tau, mode, decoder_len, seq_len) = match task {
            Task::Market => (5, 0.001, Mode::Seq2Seq, 10, 30),
            Task::Bytes => (3, 0.06, Mode::Rnn, 0, 50),
            Task::Modsum => (3, 0.01, Mode::Rnn, 0, 20),
        };
        Self {
            kind: ModelKind::Lfact,
            hidden: 128,
            max_layers,
            epsilon: 0.01,
            strategy: Strategy::All,
            combiner: CombinerKind::Affine,
            mode,
            decoder_len,
            tau,
            mu: 0.1,
            lr: 0.0005,
            batch: 16,
            clip: 1.0,
            task,
            path: None,
            seq_len,
            n_train: 512,
            n_val: 64,
            n_test: 64,
            epochs: 5,
            patience: 0,
            seed: 0,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("{key}: unknown key")));
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("{key}: given twice")));
            }
        }
        let task = match entries.get("data.task") {
            Some(v) => Task::parse(v).ok_or_else(|| bad("data.task", v))?,
            None => Task::Modsum,
        };
        let mut c = Self::defaults(task);
        for (key, v) in &entries {
            let v = v.as_str();
            match key.as_str() {
                "model.kind" => c.kind = ModelKind::parse(v).ok_or_else(|| bad(key, v))?,
                "model.hidden" => c.hidden = num(key, v)?,
                "model.max_layers" => c.max_layers = num(key, v)?,
                "model.epsilon" => c.epsilon = num(key, v)?,
                "model.strategy" => {
                    c.strategy = match v {
                        "ltd" => Strategy::Ltd,
                        "all" => Strategy::All,
                        _ => return Err(bad(key, v)),
                    }
                }
                "model.combiner" => {
                    c.combiner = match v {
                        "affine" => CombinerKind::Affine,
                        "mlp" => CombinerKind::Mlp,
                        _ => return Err(bad(key, v)),
                    }
                }
                "mode" => {
                    c.mode = match v {
                        "rnn" => Mode::Rnn,
                        "seq2seq" => Mode::Seq2Seq,
                        _ => return Err(bad(key, v)),
                    }
                }
                "seq2seq.decoder_len" => c.decoder_len = num(key, v)?,
                "loss.tau" => c.tau = num(key, v)?,
                "loss.mu" => c.mu = num(key, v)?,
                "optim.lr" => c.lr = num(key, v)?,
                "optim.batch" => c.batch = num(key, v)?,
                "optim.clip" => c.clip = num(key, v)?,
                "data.task" => {}
                "data.path" => c.path = Some(v.to_string()),
                "data.seq_len" => c.seq_len = num(key, v)?,
                "data.train" => c.n_train = num(key, v)?,
                "data.val" => c.n_val = num(key, v)?,
                "data.test" => c.n_test = num(key, v)?,
                "train.epochs" => c.epochs = num(key, v)?,
                "train.patience" => c.patience = num(key, v)?,
                "seed" => c.seed = num(key, v)?,
                _ => unreachable!("key list and match disagree"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{key}: {what}")))
            }
        };
        check(self.hidden >= 1, "model.hidden", "must be at least 1")?;
        check(
            self.max_layers >= 1,
            "model.max_layers",
            "must be at least 1",
        )?;
        check(
            self.epsilon > 0.0 && self.epsilon < 1.0,
            "model.epsilon",
            "must lie in (0, 1)",
        )?;
        check(self.tau >= 0.0, "loss.tau", "must be non-negative")?;
        check(self.mu >= 0.0, "loss.mu", "must be non-negative")?;
        check(self.lr > 0.0, "optim.lr", "must be positive")?;
        check(self.batch >= 1, "optim.batch", "must be at least 1")?;
        check(self.clip > 0.0, "optim.clip", "must be positive")?;
        check(self.seq_len >= 1, "data.seq_len", "must be at least 1")?;
        check(self.n_train >= 1, "data.train", "must be at least 1")?;
        check(self.epochs >= 1, "train.epochs", "must be at least 1")?;
        if self.mode == Mode::Seq2Seq {
            check(
                self.decoder_len >= 1,
                "seq2seq.decoder_len",
                "must be at least 1",
            )?;
            check(
                self.seq_len > self.decoder_len,
                "seq2seq.decoder_len",
                "must be shorter than data.seq_len",
            )?;
        }
        if self.task == Task::Bytes {
            check(
                self.path.is_some(),
                "data.path",
                "required for the bytes task",
            )?;
        }
        Ok(())
    }

    /// Encoder steps in seq2seq mode.
    pub fn encoder_len(&self) -> usize {
        self.seq_len - self.decoder_len
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            mu: self.mu,
        }
    }

    pub fn model_spec(&self, input_dim: usize, heads: usize, classes: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.kind, input_dim, self.hidden, heads, classes);
        spec.max_layers = self.max_layers;
        spec.epsilon = self.epsilon;
        spec.strategy = self.strategy;
        spec.combiner = self.combiner;
        spec.decoder_len = match self.mode {
            Mode::Rnn => None,
            Mode::Seq2Seq => Some(self.decoder_len),
        };
        spec
    }

    /// Train, validation and test sets described by the `data.*` keys.
    pub fn datasets(&self) -> Result<[Dataset; 3]> {
        let counts = SplitCounts {
            train: self.n_train,
            val: self.n_val,
            test: self.n_test,
        };
        let sets = match self.task {
            Task::Bytes => {
                let path = self
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.path: required".into()))?;
                load_byte_corpus(
                    Path::new(path),
                    self.seq_len,
                    counts,
                    &mut Rng::derived(self.seed, 10),
                )?
            }
            Task::Modsum | Task::Market => {
                let make = |split: Split, n: usize| {
                    let mut rng = Rng::derived(self.seed, 10 + split as u64);
                    match self.task {
                        Task::Modsum => gen_modsum(&mut rng, n, self.seq_len, split),
                        _ => {
                            gen_market_surrogate(&mut rng, n, self.seq_len, MARKET_CHANNELS, split)
                        }
                    }
                };
                [
                    make(Split::Train, counts.train)?,
                    make(Split::Val, counts.val)?,
                    make(Split::Test, counts.test)?,
                ]
            }
        };
        match self.mode {
            Mode::Rnn => Ok(sets),
            Mode::Seq2Seq => {
                let [a, b, c] = sets;
                let t = self.encoder_len();
                Ok([a.to_seq2seq(t)?, b.to_seq2seq(t)?, c.to_seq2seq(t)?])
            }
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("model.kind", self.kind.name().into());
        put("model.hidden", self.hidden.to_string());
        put("model.max_layers", self.max_layers.to_string());
        put("model.epsilon", format!("{:?}", self.epsilon));
        put(
            "model.strategy",
            match self.strategy {
                Strategy::Ltd => "ltd",
                Strategy::All => "all",
            }
            .into(),
        );
        put(
            "model.combiner",
            match self.combiner {
                CombinerKind::Affine => "affine",
                CombinerKind::Mlp => "mlp",
            }
            .into(),
        );
        put(
            "mode",
            match self.mode {
                Mode::Rnn => "rnn",
                Mode::Seq2Seq => "seq2seq",
            }
            .into(),
        );
        put("seq2seq.decoder_len", self.decoder_len.to_string());
        put("loss.tau", format!("{:?}", self.tau));
        put("loss.mu", format!("{:?}", self.mu));
        put("optim.lr", format!("{:?}", self.lr));
        put("optim.batch", self.batch.to_string());
        put("optim.clip", format!("{:?}", self.clip));
        put("data.task", self.task.name().into());
        if let Some(p) = &self.path {
            put("data.path", p.clone());
        }
        put("data.seq_len", self.seq_len.to_string());
        put("data.train", self.n_train.to_string());
        put("data.val", self.n_val.to_string());
        put("data.test", self.n_test.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.patience", self.patience.to_string());
        put("seed", self.seed.to_string());
        s
    }
}
