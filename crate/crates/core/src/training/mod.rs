//! Adam, batched training, evaluation, and the fit loop.

mod checkpoint;

use std::collections::BTreeMap;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};

use crate::config::RunConfig;
use crate::data::{Dataset, Sample, Task};
use crate::error::{Error, Result};
use crate::metrics::{bpc, macro_f1_heads, nt_stats, MetricReport, NtStats};
use crate::model::{LossConfig, ModelSpec, SampleResult};
use crate::numeric::{NumericError, ParamStore, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam step. `grads` must hold exactly the keys and
/// shapes of `params`.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step + 1;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let mut next = ParamStore::new();
    let mut m_next = ParamStore::new();
    let mut v_next = ParamStore::new();
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| NumericError::MissingParam(name.to_string()))?;
        let (m, v) = match (state.m.get(name), state.v.get(name)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(NumericError::MissingParam(name.to_string()).into()),
        };
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "adam",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
        let mut pd = Vec::with_capacity(p.len());
        let mut md = Vec::with_capacity(p.len());
        let mut vd = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            pd.push(p.data()[i] - update);
            md.push(mi);
            vd.push(vi);
        }
        next.insert(name, p.with_data(pd)?);
        m_next.insert(name, m.with_data(md)?);
        v_next.insert(name, v.with_data(vd)?);
    }
    *params = next;
    state.m = m_next;
    state.v = v_next;
    state.step = t;
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &ParamStore, max_norm: f64) -> ParamStore {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scaled(max_norm / norm)
    } else {
        grads.clone()
    }
}

/// Settings of the optimization loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub loss: LossConfig,
    pub clip: f64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn from_run(c: &RunConfig) -> Self {
        Self {
            batch: c.batch,
            loss: c.loss(),
            clip: c.clip,
            adam: AdamConfig {
                lr: c.lr,
                ..AdamConfig::default()
            },
        }
    }
}

/// Per-sample losses and the batch-mean gradient.
///
/// Each sample runs on its own tape, so a halted sample's rounds are
/// untouched by other samples that keep computing.
pub fn batch_gradients(
    spec: &ModelSpec,
    params: &ParamStore,
    samples: &[&Sample],
    loss: LossConfig,
) -> Result<(Vec<f64>, ParamStore)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = params.zeros_like();
    let mut losses = Vec::with_capacity(samples.len());
    for s in samples {
        let r = spec.run_sample(params, s, loss, true)?;
        total.accumulate(&r.grads.expect("gradients requested"))?;
        losses.push(r.loss);
    }
    Ok((losses, total.scaled(1.0 / samples.len() as f64)))
}

/// Forward, backward, clip, and one Adam update. Returns per-sample losses
/// measured before the update.
pub fn train_batch(
    spec: &ModelSpec,
    params: &mut ParamStore,
    adam: &mut AdamState,
    samples: &[&Sample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let (losses, grads) = batch_gradients(spec, params, samples, cfg.loss)?;
    adam_update(params, &clip_global_norm(&grads, cfg.clip), adam)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// One pass over `data` in an order shuffled by `rng`.
pub fn train_epoch(
    spec: &ModelSpec,
    params: &mut ParamStore,
    adam: &mut AdamState,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut sum = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        sum += train_batch(spec, params, adam, &samples, cfg)?
            .iter()
            .sum::<f64>();
        batches += 1;
    }
    Ok(EpochStats {
        mean_loss: sum / data.len() as f64,
        batches,
    })
}

/// Metrics of a model on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Mean ponder cost `N_t + r_t` per executed step.
    pub ponder: f64,
    /// BPC for byte modeling, macro-F1 otherwise.
    pub score: f64,
    pub f1_per_step: Option<Vec<f64>>,
    pub nt: NtStats,
}

/// Name of the selection metric for a task and whether lower is better.
pub fn score_name(task: Task) -> (&'static str, bool) {
    match task {
        Task::Bytes => ("bpc", true),
        Task::Modsum | Task::Market => ("macro_f1", false),
    }
}

pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamStore,
    data: &Dataset,
    loss: LossConfig,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    spec.check_dataset(data)?;
    let results: Vec<SampleResult> = data
        .samples
        .iter()
        .map(|s| spec.run_sample(params, s, loss, false))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mean_loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
    let steps: usize = results.iter().map(|r| r.records.len()).sum();
    let ponder = results
        .iter()
        .flat_map(|r| &r.records)
        .map(|r| r.ponder())
        .sum::<f64>()
        / steps as f64;
    let records: Vec<_> = results.iter().map(|r| r.records.clone()).collect();
    let nt = nt_stats(&records, spec.max_layers)?;
    let (score, f1_per_step) = match data.task {
        Task::Bytes => {
            let mut probs = Vec::new();
            for (r, s) in results.iter().zip(&data.samples) {
                for (pred, target) in r.predictions.iter().zip(&s.targets) {
                    probs.push(pred[0].data()[target[0]]);
                }
            }
            (bpc(&probs), None)
        }
        Task::Modsum | Task::Market => {
            let predicted = |r: &SampleResult, t: usize| -> Vec<usize> {
                r.predictions[t].iter().map(|p| p.argmax()).collect()
            };
            let len = data.samples[0].targets.len();
            let mut per_step = Vec::with_capacity(len);
            let mut all_p = Vec::new();
            let mut all_t = Vec::new();
            for t in 0..len {
                let p: Vec<Vec<usize>> = results.iter().map(|r| predicted(r, t)).collect();
                let tr: Vec<Vec<usize>> =
                    data.samples.iter().map(|s| s.targets[t].clone()).collect();
                per_step.push(macro_f1_heads(&p, &tr, data.classes)?);
                all_p.extend(p);
                all_t.extend(tr);
            }
            (
                macro_f1_heads(&all_p, &all_t, data.classes)?,
                Some(per_step),
            )
        }
    };
    Ok(Evaluation {
        loss: mean_loss,
        ponder,
        score,
        f1_per_step,
        nt,
    })
}

impl Evaluation {
    pub fn report(
        &self,
        epoch: Option<usize>,
        split: &str,
        model: &str,
        task: Task,
    ) -> MetricReport {
        let mut metrics = BTreeMap::new();
        metrics.insert(score_name(task).0.to_string(), self.score);
        metrics.insert("loss".into(), self.loss);
        metrics.insert("ponder".into(), self.ponder);
        metrics.insert("max_nt".into(), self.nt.max_nt as f64);
        metrics.insert("multi_round_fraction".into(), self.nt.multi_round_fraction);
        let mean_nt =
            self.nt.mean_per_step.iter().sum::<f64>() / self.nt.mean_per_step.len() as f64;
        metrics.insert("mean_nt".into(), mean_nt);
        let mut per_step = BTreeMap::new();
        per_step.insert("mean_nt".into(), self.nt.mean_per_step.clone());
        per_step.insert(
            "max_nt".into(),
            self.nt.max_per_step.iter().map(|&m| m as f64).collect(),
        );
        if let Some(f1) = &self.f1_per_step {
            per_step.insert("f1".into(), f1.clone());
        }
        MetricReport {
            epoch,
            split: split.into(),
            model: model.into(),
            metrics,
            per_step,
        }
    }
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    /// Train and validation reports, two per epoch.
    pub log: Vec<MetricReport>,
    /// Validation evaluations performed.
    pub evaluations: usize,
}

/// Trains for `config.epochs` epochs, evaluating on `val` after each and
/// keeping the best weights. With `patience > 0`, stops once that many
/// consecutive epochs fail to improve. `on_report` sees every report as it
/// is produced.
pub fn fit(
    config: &RunConfig,
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    mut on_report: impl FnMut(&MetricReport) -> Result<()>,
) -> Result<FitOutcome> {
    spec.check_dataset(train)?;
    spec.check_dataset(val)?;
    let cfg = TrainConfig::from_run(config);
    let mut params = spec.init_params(&mut Rng::derived(config.seed, 0));
    let mut adam = AdamState::new(&params, cfg.adam);
    let (_, lower_better) = score_name(train.task);
    let model = spec.kind.name();
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let mut evaluations = 0;
    for epoch in 1..=config.epochs {
        let mut rng = Rng::derived(config.seed, 1000 + epoch as u64);
        let stats = train_epoch(spec, &mut params, &mut adam, train, &cfg, &mut rng)?;
        let mut train_report = MetricReport {
            epoch: Some(epoch),
            split: "train".into(),
            model: model.into(),
            metrics: BTreeMap::new(),
            per_step: BTreeMap::new(),
        };
        train_report.metrics.insert("loss".into(), stats.mean_loss);
        train_report
            .metrics
            .insert("batches".into(), stats.batches as f64);
        on_report(&train_report)?;
        log.push(train_report);

        let eval = evaluate(spec, &params, val, cfg.loss)?;
        evaluations += 1;
        let report = eval.report(Some(epoch), "val", model, val.task);
        on_report(&report)?;
        log.push(report);

        let improved = match best.as_ref().and_then(|b| b.best_metric) {
            None => true,
            Some(b) if lower_better => eval.score < b,
            Some(b) => eval.score > b,
        };
        if improved {
            best = Some(Checkpoint {
                config: config.to_text(),
                params: params.clone(),
                optimizer: Some(adam.clone()),
                epoch,
                best_metric: Some(eval.score),
            });
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        best: best.expect("at least one epoch runs"),
        log,
        evaluations,
    })
}
