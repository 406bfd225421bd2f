//! Optimization loop, evaluation protocols and mastery traces.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::multiset_flags;
use crate::graph::{chronological_batches, DynamicGraph, NodeKind, QuestionId, SplitPlan, StudentId, Timestamp, DAY};
use crate::metrics::{auc_roc, average_precision};
use crate::model::{DyGkt, LinkQuery, PairBatch};
use crate::param::{AdamConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{sigmoid, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Events per tape; gradients are accumulated over a batch.
    pub micro_batch: usize,
    pub epochs: usize,
    /// Epochs without a better validation AUC before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            batch_size: 2000,
            micro_batch: 250,
            epochs: 100,
            patience: 5,
            seed: 0,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.eval_every == 0 {
            return bad("batch_size, micro_batch and eval_every must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be non-negative and betas in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Transductive,
    Inductive,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Transductive => "transductive",
            Self::Inductive => "inductive",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trans" | "transductive" => Ok(Self::Transductive),
            "ind" | "inductive" => Ok(Self::Inductive),
            other => Err(Error::Config(format!("unknown eval mode `{other}` (trans|ind)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_events: usize,
    /// `None` when the scored set lacks positives (AP) or either class (AUC).
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub loss: Option<f64>,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn is_defined(&self) -> bool {
        self.ap.is_some() && self.auc.is_some()
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        writeln!(s, "mode={}", self.mode.as_str()).unwrap();
        writeln!(s, "n_events={}", self.n_events).unwrap();
        writeln!(s, "ap={}", opt(self.ap)).unwrap();
        writeln!(s, "auc={}", opt(self.auc)).unwrap();
        writeln!(s, "loss={}", opt(self.loss)).unwrap();
        writeln!(s, "defined={}", self.is_defined()).unwrap();
        writeln!(s, "wall_time_s={:.3}", self.wall_time_s).unwrap();
        s
    }

    /// Same metrics, ignoring timing.
    pub fn same_metrics(&self, other: &Self) -> bool {
        (self.mode, self.n_events, self.ap, self.auc, self.loss) == (other.mode, other.n_events, other.ap, other.auc, other.loss)
    }
}

/// Stable BCE of one logit.
fn bce(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Chunk size for evaluation tapes.
pub const EVAL_CHUNK: usize = 500;

/// Scores `events` against the full log (each event sees only its past).
pub fn evaluate_events<T: Scalar>(model: &DyGkt<T>, g: &DynamicGraph, events: &[usize], mode: EvalMode) -> Result<EvalReport> {
    let start = Instant::now();
    let (ap, auc, loss) = if events.is_empty() {
        (None, None, None)
    } else {
        let logits = model.event_logits(g, events, EVAL_CHUNK)?;
        let labels: Vec<bool> = events.iter().map(|&i| g.event(i).correct).collect();
        let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let loss = logits.iter().zip(&labels).map(|(&x, &y)| bce(x, y)).sum::<f64>() / events.len() as f64;
        (average_precision(&probs, &labels), auc_roc(&probs, &labels), Some(loss))
    };
    Ok(EvalReport {
        mode,
        n_events: events.len(),
        ap,
        auc,
        loss,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Test-range evaluation under the given protocol.
pub fn evaluate<T: Scalar>(model: &DyGkt<T>, g: &DynamicGraph, split: &SplitPlan, mode: EvalMode) -> Result<EvalReport> {
    let events: Vec<usize> = match mode {
        EvalMode::Transductive => split.test.clone().collect(),
        EvalMode::Inductive => split.inductive_test.clone(),
    };
    evaluate_events(model, g, &events, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: Option<f64>,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch,train_loss,val_ap,val_auc,seconds`.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            opt(self.val_ap),
            opt(self.val_auc),
            self.seconds
        )
    }
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_ap,val_auc,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    EarlyStopped,
    /// A non-finite loss or gradient; the model holds the last good weights.
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub stop: StopReason,
    pub seconds: f64,
}

/// Runs one optimizer step over `events`, returning the batch-mean loss.
fn train_batch<T: Scalar>(
    model: &mut DyGkt<T>,
    g: &DynamicGraph,
    events: &[usize],
    cfg: &TrainConfig,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let total = events.len() as f64;
    let mut loss_sum = 0.0;
    model.store.zero_grads();
    for part in events.chunks(cfg.micro_batch) {
        let batch = PairBatch::for_events(g, part.iter().copied(), model.config().neighbor_len)?;
        let labels: Vec<T> = part.iter().map(|&i| if g.event(i).correct { T::one() } else { T::zero() }).collect();
        let mut tape = Tape::new();
        let logits = model.logits(&mut tape, &batch, Some(rng))?;
        let loss = tape.bce_with_logits(logits, &labels)?;
        let weight = part.len() as f64 / total;
        loss_sum += tape.value(loss).item().to_f64_lossy() * weight;
        let scaled = tape.scale(loss, T::from_f64_lossy(weight))?;
        tape.backward(scaled)?;
        tape.accumulate_param_grads(&mut model.store)?;
    }
    fill_missing_grads(&mut model.store);
    model.store.adam_step(adam)?;
    Ok(loss_sum)
}

/// Parameters a batch never touched (e.g. a recurrent matrix when every
/// question history is empty) get a zero gradient so Adam still decays them.
fn fill_missing_grads<T: Scalar>(store: &mut ParamStore<T>) {
    for p in store.params_mut() {
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(..))
}

/// Trains on `split.train` in chronological batches, validating on
/// `split.val`. On return the model holds the best-validation weights.
pub fn train<T: Scalar>(
    model: &mut DyGkt<T>,
    g: &DynamicGraph,
    split: &SplitPlan,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let adam = cfg.adam();
    // Dropout draws from its own stream so initialization stays comparable.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40f);
    let train_events: Vec<usize> = split.train.clone().collect();
    let val_events: Vec<usize> = split.val.clone().collect();
    if train_events.is_empty() {
        return Err(Error::Contract("training range is empty".into()));
    }

    let mut best: Option<(usize, (f64, f64), ParamStore<T>)> = None;
    let mut last_good = model.store.clone();
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stop = StopReason::EpochLimit;

    'epochs: for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for range in chronological_batches(0..train_events.len(), cfg.batch_size)? {
            let events = &train_events[range];
            match train_batch(model, g, events, cfg, &adam, &mut rng) {
                Ok(l) if l.is_finite() => loss_sum += l * events.len() as f64,
                Ok(_) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) if is_divergence(&e) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if model.store.params().iter().any(|p| !p.value.all_finite()) {
            stop = StopReason::Diverged;
            break;
        }
        last_good = model.store.clone();

        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let (val_ap, val_auc, val_loss) = if evaluate_now && !val_events.is_empty() {
            let r = evaluate_events(model, g, &val_events, EvalMode::Transductive)?;
            (r.ap, r.auc, r.loss)
        } else {
            (None, None, None)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_events.len() as f64,
            val_ap,
            val_auc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);

        if evaluate_now {
            // Ties on AUC (common once validation saturates) go to the lower loss.
            let score = (val_auc.unwrap_or(f64::NEG_INFINITY), -val_loss.unwrap_or(f64::INFINITY));
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((epoch, score, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    stop = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_auc) = match best {
        Some((epoch, score, store)) => {
            model.store = store;
            (Some(epoch), score.0.is_finite().then_some(score.0))
        }
        None => {
            model.store = last_good;
            (None, None)
        }
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_auc,
        stop,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean training loss of the first epoch, without updating anything except
/// a throwaway copy of the model.
pub fn first_epoch_loss<T: Scalar>(model: &DyGkt<T>, g: &DynamicGraph, split: &SplitPlan, cfg: &TrainConfig) -> Result<f64> {
    let mut scratch = model.clone();
    let cfg = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    let out = train(&mut scratch, g, split, &cfg, |_| {})?;
    out.log
        .first()
        .map(|r| r.train_loss)
        .ok_or_else(|| Error::Contract("no epoch completed".into()))
}

/// Interval bucket labels matching the stats command.
pub fn interval_bucket(dt: i64) -> &'static str {
    match dt {
        d if d < 60 => "<1min",
        d if d < 3_600 => "<1h",
        d if d < DAY => "<1day",
        d if d < 7 * DAY => "<1week",
        _ => ">=1week",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub event: usize,
    pub timestamp: Timestamp,
    pub attempted_question: usize,
    pub correct: bool,
    pub probability: f64,
    /// Gap from this step to the next one (or to `upto` for the last).
    pub interval_bucket: String,
    /// `[attempted question is the target] + [same concept]`.
    pub multiset_flag: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasteryTrace {
    pub student: usize,
    pub question: usize,
    pub upto: Timestamp,
    pub requested_steps: usize,
    pub truncated: bool,
    pub steps: Vec<TraceStep>,
}

/// Predicted probability that `student` answers `question` correctly,
/// queried just after each of their last `steps` events before `upto`.
pub fn mastery_trace<T: Scalar>(
    model: &DyGkt<T>,
    g: &DynamicGraph,
    student: StudentId,
    question: QuestionId,
    upto: Timestamp,
    steps: usize,
) -> Result<MasteryTrace> {
    if student.0 >= g.num_students() {
        return Err(Error::UnknownNode {
            kind: "student",
            id: student.0.to_string(),
        });
    }
    let concept = match g.question_events(question).first() {
        Some(&i) => g.event(i).concept,
        None if question.0 < g.num_questions() => {
            return Err(Error::Contract(format!("question {} has no events to take a concept from", question.0)))
        }
        None => {
            return Err(Error::UnknownNode {
                kind: "question",
                id: question.0.to_string(),
            })
        }
    };
    if steps == 0 {
        return Err(Error::Contract("steps must be at least 1".into()));
    }
    let history = g.recent_neighbors(student.0, NodeKind::Student, upto, None, steps)?;
    if history.num_valid() == 0 {
        return Err(Error::Contract(format!("student {} has no events before {upto}", student.0)));
    }
    let flags = multiset_flags(&history, question, concept, student);
    let picked: Vec<(usize, u8)> = history
        .entries
        .iter()
        .zip(&flags)
        .filter_map(|(e, &f)| e.event.map(|i| (i, f)))
        .collect();
    let queries: Vec<LinkQuery> = picked
        .iter()
        .map(|&(i, _)| LinkQuery {
            student,
            question,
            concept,
            timestamp: g.event(i).timestamp + 1,
            exclude: None,
        })
        .collect();
    let batch = PairBatch::build(g, &queries, model.config().neighbor_len)?;
    let probs = model.predict(&batch)?;
    let steps_out = picked
        .iter()
        .enumerate()
        .map(|(k, &(i, flag))| {
            let e = g.event(i);
            let next = picked.get(k + 1).map_or(upto, |&(j, _)| g.event(j).timestamp);
            TraceStep {
                step: k,
                event: i,
                timestamp: e.timestamp,
                attempted_question: e.question.0,
                correct: e.correct,
                probability: probs[k],
                interval_bucket: interval_bucket(next - e.timestamp).to_string(),
                multiset_flag: flag,
            }
        })
        .collect::<Vec<_>>();
    Ok(MasteryTrace {
        student: student.0,
        question: question.0,
        upto,
        requested_steps: steps,
        truncated: steps_out.len() < steps,
        steps: steps_out,
    })
}
