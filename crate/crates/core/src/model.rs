//! The full link classifier: encoders, both towers and the pair head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{history_deltas, multiset_flags, ConceptEmbedding, DualTimeEncoder, MultisetIndicator, PerformanceEncoder};
use crate::graph::{ConceptId, DynamicGraph, NeighborSequence, NodeKind, QuestionId, StudentId, Timestamp, DAY};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{sigmoid, Tape, Var};
use crate::towers::{Linear, QuestionMode, QuestionTower, StudentTower, TowerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// History window per endpoint (N).
    pub neighbor_len: usize,
    /// Short/long split of the time encoder, seconds (ΔT).
    pub time_threshold: i64,
    pub dropout: f64,
    pub tower: TowerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            neighbor_len: 50,
            time_threshold: DAY,
            dropout: 0.1,
            tower: TowerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        if self.neighbor_len == 0 {
            return Err(Error::Config("neighbor_len must be at least 1".into()));
        }
        if self.time_threshold < 0 {
            return Err(Error::Config("time_threshold must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Everything a checkpoint must agree on to be loadable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSignature {
    pub scalar: String,
    pub num_questions: usize,
    pub num_concepts: usize,
    pub config: ModelConfig,
}

impl ModelSignature {
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("signature serializes");
        Sha256::digest(&json).into()
    }
}

/// One link to score: `student` answering `question` at `timestamp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkQuery {
    pub student: StudentId,
    pub question: QuestionId,
    pub concept: ConceptId,
    pub timestamp: Timestamp,
    /// The event being scored, kept out of its own histories.
    pub exclude: Option<usize>,
}

impl LinkQuery {
    pub fn from_event(g: &DynamicGraph, index: usize) -> Self {
        let e = g.event(index);
        Self {
            student: e.student,
            question: e.question,
            concept: e.concept,
            timestamp: e.timestamp,
            exclude: Some(index),
        }
    }
}

/// Per-position inputs for one side of a batch, step-major
/// (`row = step·batch + b`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideInputs {
    pub mask: Vec<bool>,
    pub correct: Vec<bool>,
    pub deltas: Vec<i64>,
    pub flags: Vec<u8>,
    pub concepts: Vec<Option<usize>>,
}

impl SideInputs {
    fn with_capacity(rows: usize) -> Self {
        Self {
            mask: vec![false; rows],
            correct: vec![false; rows],
            deltas: vec![0; rows],
            flags: vec![0; rows],
            concepts: vec![None; rows],
        }
    }

    fn fill(&mut self, seq: &NeighborSequence, flags: &[u8], b: usize, batch: usize) -> Result<()> {
        let ts: Vec<Timestamp> = seq.entries.iter().map(|e| e.timestamp).collect();
        let deltas = history_deltas(&ts, &seq.valid_mask, seq.as_of)?;
        for (step, e) in seq.entries.iter().enumerate() {
            let row = step * batch + b;
            let valid = seq.valid_mask[step];
            self.mask[row] = valid;
            self.correct[row] = e.correct;
            self.deltas[row] = deltas[step];
            self.flags[row] = flags[step];
            self.concepts[row] = valid.then_some(e.concept.0);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub batch: usize,
    pub len: usize,
    pub student: SideInputs,
    pub question: SideInputs,
    pub target_questions: Vec<usize>,
    pub target_concepts: Vec<usize>,
}

impl PairBatch {
    /// Gathers both endpoint histories (latest `len` events strictly before
    /// each query's timestamp) for every query.
    pub fn build(g: &DynamicGraph, queries: &[LinkQuery], len: usize) -> Result<Self> {
        let batch = queries.len();
        if batch == 0 {
            return Err(Error::Contract("empty query batch".into()));
        }
        let rows = batch * len;
        let mut out = Self {
            batch,
            len,
            student: SideInputs::with_capacity(rows),
            question: SideInputs::with_capacity(rows),
            target_questions: Vec::with_capacity(batch),
            target_concepts: Vec::with_capacity(batch),
        };
        for (b, q) in queries.iter().enumerate() {
            if q.concept.0 >= g.num_concepts() {
                return Err(Error::UnknownNode {
                    kind: "concept",
                    id: q.concept.0.to_string(),
                });
            }
            let s_seq = g.recent_neighbors(q.student.0, NodeKind::Student, q.timestamp, q.exclude, len)?;
            let q_seq = g.recent_neighbors(q.question.0, NodeKind::Question, q.timestamp, q.exclude, len)?;
            let s_flags = multiset_flags(&s_seq, q.question, q.concept, q.student);
            let q_flags = multiset_flags(&q_seq, q.question, q.concept, q.student);
            out.student.fill(&s_seq, &s_flags, b, batch)?;
            out.question.fill(&q_seq, &q_flags, b, batch)?;
            out.target_questions.push(q.question.0);
            out.target_concepts.push(q.concept.0);
        }
        Ok(out)
    }

    /// Events `range` of `g`, each scored against its own past.
    pub fn for_events(g: &DynamicGraph, events: impl IntoIterator<Item = usize>, len: usize) -> Result<Self> {
        let queries: Vec<LinkQuery> = events.into_iter().map(|i| LinkQuery::from_event(g, i)).collect();
        Self::build(g, &queries, len)
    }
}

/// `[2d → d]`, relu, `[d → 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictorHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl PredictorHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            hidden: Linear::new(store, "head.hidden", 2 * dim, dim, rng),
            out: Linear::new(store, "head.out", dim, 1, rng),
        }
    }

    /// Logits `[B, 1]` for stacked pair embeddings.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_s: Var, x_q: Var) -> Result<Var> {
        let pair = tape.concat_cols(&[x_s, x_q])?;
        let h = self.hidden.forward(tape, store, pair)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, store, h)
    }

    /// Probability for a single pair of embeddings.
    pub fn predict_pair<T: Scalar>(&self, store: &ParamStore<T>, x_s: &[T], x_q: &[T]) -> Result<f64> {
        let mut tape = Tape::inference();
        let row = |v: &[T]| crate::tensor::Tensor::new(vec![1, v.len()], v.to_vec());
        let xs = tape.constant(row(x_s)?)?;
        let xq = tape.constant(row(x_q)?)?;
        let logit = self.forward(&mut tape, store, xs, xq)?;
        Ok(sigmoid(tape.value(logit).item().to_f64_lossy()))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum QuestionSide {
    Dynamic(QuestionTower),
    IdEmbed(ConceptEmbedding),
    ConceptEmbed,
}

#[derive(Clone, Debug)]
pub struct DyGkt<T> {
    pub store: ParamStore<T>,
    config: ModelConfig,
    num_questions: usize,
    num_concepts: usize,
    performance: PerformanceEncoder,
    student_time: Option<DualTimeEncoder>,
    question_time: Option<DualTimeEncoder>,
    multiset: Option<MultisetIndicator>,
    concepts: ConceptEmbedding,
    student: StudentTower,
    question: QuestionSide,
    head: PredictorHead,
}

impl<T: Scalar> DyGkt<T> {
    /// Freshly initialized model; `seed` drives every initial weight.
    pub fn new(config: ModelConfig, num_questions: usize, num_concepts: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_questions == 0 || num_concepts == 0 {
            return Err(Error::Config("model needs at least one question and one concept".into()));
        }
        let tc = &config.tower;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let performance = PerformanceEncoder::new(&mut store, tc.dim_edge, &mut rng);
        let time = |store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng| {
            tc.use_time
                .then(|| DualTimeEncoder::new(store, name, tc.dim_time, config.time_threshold, tc.use_dual_time, rng))
        };
        let student_time = time(&mut store, "student.time", &mut rng);
        let dynamic = tc.question_mode == QuestionMode::Dynamic;
        let question_time = if dynamic { time(&mut store, "question.time", &mut rng) } else { None };
        let multiset = tc.use_multiset.then(|| MultisetIndicator::new(&mut store, tc.dim_node, &mut rng));
        let concepts = ConceptEmbedding::new(&mut store, "concept.embedding", num_concepts, tc.dim_edge, &mut rng);
        let student = StudentTower::new(&mut store, tc, &mut rng);
        let question = match tc.question_mode {
            QuestionMode::Dynamic => {
                let shared = tc.share_output_projection.then_some(student.out);
                QuestionSide::Dynamic(QuestionTower::new(&mut store, tc, shared, &mut rng))
            }
            QuestionMode::QuestionIdEmbed => QuestionSide::IdEmbed(ConceptEmbedding::new(
                &mut store,
                "question.id_embedding",
                num_questions,
                tc.dim_edge,
                &mut rng,
            )),
            QuestionMode::ConceptIdEmbed => QuestionSide::ConceptEmbed,
        };
        let head = PredictorHead::new(&mut store, tc.dim_edge, &mut rng);
        Ok(Self {
            store,
            config,
            num_questions,
            num_concepts,
            performance,
            student_time,
            question_time,
            multiset,
            concepts,
            student,
            question,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn signature(&self) -> ModelSignature {
        ModelSignature {
            scalar: T::NAME.to_string(),
            num_questions: self.num_questions,
            num_concepts: self.num_concepts,
            config: self.config.clone(),
        }
    }

    pub fn student_tower(&self) -> &StudentTower {
        &self.student
    }

    pub fn question_side(&self) -> &QuestionSide {
        &self.question
    }

    pub fn head(&self) -> &PredictorHead {
        &self.head
    }

    /// `(x_s, x_q)`, each `[batch, dim_edge]`. Dropout is active only when
    /// `rng` is given.
    pub fn tower_outputs(&self, tape: &mut Tape<T>, batch: &PairBatch, mut rng: Option<&mut dyn RngCore>) -> Result<(Var, Var)> {
        let store = &self.store;
        let rate = self.config.dropout;
        let s = &batch.student;

        let mut parts = vec![self.performance.forward(tape, store, &s.correct, &s.mask)?];
        if let Some(enc) = &self.student_time {
            parts.push(enc.forward(tape, store, &s.deltas, &s.mask)?);
        }
        if let Some(mi) = &self.multiset {
            parts.push(mi.forward(tape, store, &s.flags, &s.mask)?);
        }
        parts.push(self.concepts.forward(tape, store, &s.concepts)?);
        let drop = rng.as_mut().map(|r| (rate, &mut **r as &mut dyn RngCore));
        let x_s = self.student.forward(tape, store, &parts, &s.mask, batch.batch, drop)?;

        let x_q = match &self.question {
            QuestionSide::Dynamic(tower) => {
                let q = &batch.question;
                let mut parts = vec![self.performance.forward(tape, store, &q.correct, &q.mask)?];
                if let Some(enc) = &self.question_time {
                    parts.push(enc.forward(tape, store, &q.deltas, &q.mask)?);
                }
                if let Some(mi) = &self.multiset {
                    parts.push(mi.forward(tape, store, &q.flags, &q.mask)?);
                }
                let target = if self.config.tower.use_concept_in_question_output {
                    Some(self.concepts.forward(tape, store, &Self::ids(&batch.target_concepts))?)
                } else {
                    None
                };
                let drop = rng.as_mut().map(|r| (rate, &mut **r as &mut dyn RngCore));
                tower.forward(tape, store, &parts, &q.mask, batch.batch, target, drop)?
            }
            QuestionSide::IdEmbed(table) => table.forward(tape, store, &Self::ids(&batch.target_questions))?,
            QuestionSide::ConceptEmbed => self.concepts.forward(tape, store, &Self::ids(&batch.target_concepts))?,
        };
        Ok((x_s, x_q))
    }

    fn ids(v: &[usize]) -> Vec<Option<usize>> {
        v.iter().map(|&i| Some(i)).collect()
    }

    /// Pair logits `[batch, 1]`.
    pub fn logits(&self, tape: &mut Tape<T>, batch: &PairBatch, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let (x_s, x_q) = self.tower_outputs(tape, batch, rng)?;
        self.head.forward(tape, &self.store, x_s, x_q)
    }

    /// Logits with dropout off.
    pub fn predict_logits(&self, batch: &PairBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let logits = self.logits(&mut tape, batch, None)?;
        Ok(tape.value(logits).data().iter().map(|x| x.to_f64_lossy()).collect())
    }

    /// Probabilities with dropout off.
    pub fn predict(&self, batch: &PairBatch) -> Result<Vec<f64>> {
        Ok(self.predict_logits(batch)?.into_iter().map(sigmoid).collect())
    }

    /// Logits for `events` of `g`, built in chunks of `chunk`.
    pub fn event_logits(&self, g: &DynamicGraph, events: &[usize], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(events.len());
        for part in events.chunks(chunk.max(1)) {
            let batch = PairBatch::for_events(g, part.iter().copied(), self.config.neighbor_len)?;
            out.extend(self.predict_logits(&batch)?);
        }
        Ok(out)
    }
}
