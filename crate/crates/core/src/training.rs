//! Minibatch training, evaluation and incremental layer conversion.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_batch, AugmentConfig, DataError, Dataset};
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::network::{Network, NetworkError};
use crate::nn::{adam_step, softmax_cross_entropy, AdamConfig, AdamState, MathMode, NnError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss in {phase}, epoch {epoch}, batch {batch}")]
    NonFinite {
        phase: String,
        epoch: usize,
        batch: usize,
    },
    #[error("dataset {0} is empty")]
    EmptyDataset(&'static str),
    #[error("dataset has {found} classes, network expects {expected}")]
    Classes { found: usize, expected: usize },
    #[error("conversion plan: {0}")]
    Plan(String),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        Self::Network(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Adam moments for every trainable buffer of a network.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub cfg: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(net: &Network<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: net.param_sizes().into_iter().map(AdamState::new).collect(),
        }
    }

    /// Applies the accumulated gradients, then clears them.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        let mut states = self.states.iter_mut();
        let mut err = None;
        let cfg = self.cfg;
        net.visit_params_mut(&mut |p, g| {
            let Some(state) = states.next() else {
                err.get_or_insert(NnError::Shape(
                    "optimizer has fewer buffers than the network".into(),
                ));
                return;
            };
            if let Err(e) = adam_step(p, g, state, &cfg) {
                err.get_or_insert(e);
            }
        });
        net.zero_grads();
        match err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    /// Worker threads for evaluation; 1 keeps everything on the caller.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            threads: 1,
        }
    }
}

/// How long one training phase runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Schedule {
    Fixed {
        epochs: usize,
    },
    /// Stops after `patience` epochs without a validation-accuracy gain and
    /// restores the best weights.
    EarlyStopping {
        max_epochs: usize,
        patience: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub wall_time: f64,
}

pub const EPOCH_CSV_HEADER: &str = "phase,epoch,train_loss,train_accuracy,val_accuracy";

/// Per-epoch metrics. Wall time is left out so that a rerun with the same
/// seed produces an identical file.
pub fn epochs_to_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.phase, r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy
        ));
    }
    out
}

fn check_classes<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<()> {
    if ds.num_classes != net.spec.num_classes {
        return Err(TrainError::Classes {
            found: ds.num_classes,
            expected: net.spec.num_classes,
        });
    }
    Ok(())
}

/// Predicted classes for every sample, evaluated in batches.
pub fn predict_dataset<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    mode: MathMode,
    batch_size: usize,
    threads: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let run = |chunk: &[usize]| -> Result<Vec<usize>> {
        let (x, _) = ds.batch(chunk)?;
        Ok(net.predict(&x, mode)?)
    };
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let parts: Vec<Result<Vec<usize>>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::Threads(e.to_string()))?;
        pool.install(|| chunks.par_iter().map(|c| run(c)).collect())
    } else {
        chunks.iter().map(|c| run(c)).collect()
    };
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    mode: MathMode,
    batch_size: usize,
    threads: usize,
) -> Result<Metrics> {
    check_classes(net, ds)?;
    let pred = predict_dataset(net, ds, mode, batch_size, threads)?;
    Ok(compute_metrics(&pred, &ds.labels, ds.num_classes)?)
}

/// Everything a training phase needs besides the network.
pub struct PhaseContext<'a, T> {
    pub train: &'a Dataset<T>,
    pub val: &'a Dataset<T>,
    pub cfg: &'a TrainConfig,
    pub seed: u64,
}

fn run_epoch<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    ctx: &PhaseContext<'_, T>,
    phase: &str,
    stream: u64,
    epoch: usize,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..ctx.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream((stream << 32) | epoch as u64);
    order.shuffle(&mut rng);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, chunk) in order.chunks(ctx.cfg.batch_size.max(1)).enumerate() {
        let (x, y) = ctx.train.batch(chunk)?;
        let x = augment_batch(&x, chunk, &ctx.cfg.augment, ctx.seed ^ stream, epoch as u64)?;
        let (logits, tape) = net.forward_train(&x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                phase: phase.into(),
                epoch,
                batch: b,
            });
        }
        loss_sum += loss * chunk.len() as f64;
        correct += logits
            .argmax_axis(1)
            .map_err(NnError::from)?
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
        net.backward(&grad, &tape)?;
        opt.step(net)?;
    }
    let n = ctx.train.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Trains `net` in place under `schedule` with fresh Adam state. `stream`
/// separates the shuffling streams of different phases.
pub fn train_phase<T: Scalar>(
    net: &mut Network<T>,
    ctx: &PhaseContext<'_, T>,
    schedule: Schedule,
    phase: &str,
    stream: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<usize> {
    if ctx.train.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    check_classes(net, ctx.train)?;
    let mut opt = Optimizer::new(net, ctx.cfg.adam);
    let (max_epochs, patience) = match schedule {
        Schedule::Fixed { epochs } => (epochs, None),
        Schedule::EarlyStopping {
            max_epochs,
            patience,
        } => (max_epochs, Some(patience)),
    };
    let mut best: Option<(f64, Network<T>)> = None;
    let mut since_best = 0;
    let mut ran = 0;
    for epoch in 0..max_epochs {
        let start = Instant::now();
        let (train_loss, train_accuracy) = run_epoch(net, &mut opt, ctx, phase, stream, epoch)?;
        let val_accuracy = if ctx.val.is_empty() {
            f64::NAN
        } else {
            evaluate(
                net,
                ctx.val,
                MathMode::Exact,
                ctx.cfg.batch_size.max(1),
                ctx.cfg.threads,
            )?
            .accuracy
        };
        ran += 1;
        log.push(EpochRecord {
            phase: phase.into(),
            epoch,
            train_loss,
            train_accuracy,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "{phase} epoch {epoch}: loss {train_loss:.4} train_acc {train_accuracy:.4} val_acc {val_accuracy:.4}"
        );
        if let Some(p) = patience {
            let score = if val_accuracy.is_nan() {
                train_accuracy
            } else {
                val_accuracy
            };
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    break;
                }
            }
        }
    }
    if let Some((_, b)) = best {
        *net = b;
    }
    Ok(ran)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConversionPlan {
    /// Convertible layers in execution order; empty means all of them.
    pub layer_order: Vec<String>,
    pub epochs_per_layer: usize,
    pub final_max_epochs: usize,
    pub final_patience: usize,
}

impl Default for ConversionPlan {
    fn default() -> Self {
        Self {
            layer_order: Vec::new(),
            epochs_per_layer: 50,
            final_max_epochs: 100,
            final_patience: 10,
        }
    }
}

impl ConversionPlan {
    /// The full layer order, checked against the network's convertible layers.
    pub fn resolve<T: Scalar>(&self, net: &Network<T>) -> Result<Vec<String>> {
        let convertible: Vec<String> = net
            .linear_layers()
            .into_iter()
            .filter(|l| l.convertible)
            .map(|l| l.id.clone())
            .collect();
        if self.layer_order.is_empty() {
            return Ok(convertible);
        }
        for id in &self.layer_order {
            if net.linear(id).is_none() {
                return Err(TrainError::Plan(format!("unknown layer {id:?}")));
            }
            if !convertible.contains(id) {
                return Err(TrainError::Plan(format!("layer {id:?} is not convertible")));
            }
        }
        if self.layer_order != convertible {
            return Err(TrainError::Plan(format!(
                "order {:?} must list every convertible layer once, first to last: {convertible:?}",
                self.layer_order
            )));
        }
        Ok(convertible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePhase {
    Baseline,
    Converted,
    Finetuned,
    Final,
}

impl StagePhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Converted => "converted",
            Self::Finetuned => "finetuned",
            Self::Final => "final",
        }
    }
}

/// One row of the conversion stage log; metrics are on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub layer_id: String,
    pub phase: StagePhase,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub epoch_count: usize,
    pub wall_time: f64,
}

pub const STAGE_CSV_HEADER: &str =
    "stage,layer_id,phase,accuracy,macro_precision,macro_recall,epoch_count,wall_time";

pub fn stages_to_csv(records: &[StageRecord]) -> String {
    let mut out = format!("{STAGE_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.stage,
            r.layer_id,
            r.phase.as_str(),
            r.accuracy,
            r.macro_precision,
            r.macro_recall,
            r.epoch_count,
            r.wall_time
        ));
    }
    out
}

/// Newline-delimited JSON, one record per line.
pub fn stages_to_jsonl(records: &[StageRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub struct ConversionData<'a, T> {
    pub train: &'a Dataset<T>,
    pub val: &'a Dataset<T>,
    pub test: &'a Dataset<T>,
}

#[derive(Debug, Clone)]
pub struct ConversionOutcome {
    pub stages: Vec<StageRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Converts the first `limit` layers of the plan (all when `None`) one at
/// a time, fine-tuning the whole network after each, then trains with
/// early stopping if anything was converted.
pub fn incremental_convert_and_train<T: Scalar>(
    net: &mut Network<T>,
    data: &ConversionData<'_, T>,
    plan: &ConversionPlan,
    cfg: &TrainConfig,
    seed: u64,
    limit: Option<usize>,
) -> Result<ConversionOutcome> {
    let order = plan.resolve(net)?;
    let k = limit.unwrap_or(order.len());
    if k > order.len() {
        return Err(TrainError::Plan(format!(
            "{k} layers requested, {} convertible",
            order.len()
        )));
    }
    if data.test.is_empty() {
        return Err(TrainError::EmptyDataset("test"));
    }
    if k > 0 && data.train.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    let ctx = PhaseContext {
        train: data.train,
        val: data.val,
        cfg,
        seed,
    };
    let bs = cfg.batch_size.max(1);
    let mut stages = Vec::new();
    let mut epochs = Vec::new();
    let record = |net: &Network<T>,
                  stage,
                  layer_id: &str,
                  phase,
                  epoch_count,
                  start: Instant|
     -> Result<StageRecord> {
        let m = evaluate(net, data.test, MathMode::Exact, bs, cfg.threads)?;
        Ok(StageRecord {
            stage,
            layer_id: layer_id.into(),
            phase,
            accuracy: m.accuracy,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            epoch_count,
            wall_time: start.elapsed().as_secs_f64(),
        })
    };
    stages.push(record(net, 0, "", StagePhase::Baseline, 0, Instant::now())?);
    for (i, id) in order.iter().take(k).enumerate() {
        let stage = i + 1;
        let start = Instant::now();
        net.convert_layer(id)?;
        stages.push(record(net, stage, id, StagePhase::Converted, 0, start)?);
        let start = Instant::now();
        let phase = format!("finetune_{id}");
        let ran = train_phase(
            net,
            &ctx,
            Schedule::Fixed {
                epochs: plan.epochs_per_layer,
            },
            &phase,
            stage as u64,
            &mut epochs,
        )?;
        stages.push(record(net, stage, id, StagePhase::Finetuned, ran, start)?);
    }
    if k > 0 {
        let start = Instant::now();
        let schedule = Schedule::EarlyStopping {
            max_epochs: plan.final_max_epochs,
            patience: plan.final_patience,
        };
        let ran = train_phase(net, &ctx, schedule, "final", (k + 1) as u64, &mut epochs)?;
        stages.push(record(net, k + 1, "", StagePhase::Final, ran, start)?);
    }
    Ok(ConversionOutcome { stages, epochs })
}

/// Test accuracy after every stage of a conversion stopped after `k` layers.
pub fn partial_conversion_accuracy_curve<T: Scalar>(
    net: &mut Network<T>,
    data: &ConversionData<'_, T>,
    plan: &ConversionPlan,
    cfg: &TrainConfig,
    seed: u64,
    k: usize,
) -> Result<Vec<StageRecord>> {
    Ok(incremental_convert_and_train(net, data, plan, cfg, seed, Some(k))?.stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::netspec::build_lenet_like_for;

    #[test]
    fn zero_layer_plan_leaves_network_untouched() {
        let ds = synthetic_dataset::<f64>(20, [8, 8, 1], 4, 1);
        let spec = build_lenet_like_for([8, 8, 1], 4);
        let mut net = Network::from_spec(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = net.clone();
        let data = ConversionData {
            train: &ds,
            val: &ds,
            test: &ds,
        };
        let out = incremental_convert_and_train(
            &mut net,
            &data,
            &ConversionPlan::default(),
            &TrainConfig::default(),
            0,
            Some(0),
        )
        .unwrap();
        assert_eq!(net, before);
        assert_eq!(out.stages.len(), 1);
        assert_eq!(out.stages[0].phase, StagePhase::Baseline);
    }

    #[test]
    fn plan_rejects_unknown_and_reordered_layers() {
        let spec = build_lenet_like_for([8, 8, 1], 4);
        let net: Network<f64> =
            Network::from_spec(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let plan = |ids: &[&str]| ConversionPlan {
            layer_order: ids.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        assert!(
            matches!(plan(&["conv9"]).resolve(&net), Err(TrainError::Plan(m)) if m.contains("conv9"))
        );
        assert!(plan(&["conv2", "conv1", "fc1", "fc2"])
            .resolve(&net)
            .is_err());
        assert_eq!(
            plan(&["conv1", "conv2", "fc1", "fc2"])
                .resolve(&net)
                .unwrap()
                .len(),
            4
        );
    }
}
