//! Per-position encoders for history sequences.
//!
//! Every encoder maps one scalar (or id) per history position to a feature
//! row; positions whose mask bit is false come out as exact zero rows. The
//! encoders are layout-agnostic: callers pass flat per-row inputs, usually a
//! whole batch of sequences stacked step-major.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConceptId, NeighborSequence, NodeKind, QuestionId, StudentId, Timestamp, DAY};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn column<T: Scalar>(tape: &mut Tape<T>, values: impl ExactSizeIterator<Item = T>) -> Result<Var> {
    let n = values.len();
    tape.constant(Tensor::new(vec![n, 1], values.collect())?)
}

fn check_mask(op: &'static str, n: usize, mask: &[bool]) -> Result<()> {
    if n != mask.len() {
        return Err(Error::shape(op, &[n], &[mask.len()]));
    }
    Ok(())
}

/// A `[1, dim]` weight row plus bias applied to one scalar per position.
#[derive(Clone, Copy, Debug)]
pub struct ScalarAffine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ScalarAffine {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_weight(&format!("{name}.weight"), 1, dim, rng),
            bias: store.add_bias(&format!("{name}.bias"), dim),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.affine(input, w, b)
    }
}

/// Response embedding `W_E·r + b_E`.
#[derive(Clone, Copy, Debug)]
pub struct PerformanceEncoder {
    pub map: ScalarAffine,
}

impl PerformanceEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            map: ScalarAffine::new(store, "performance", dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, correct: &[bool], mask: &[bool]) -> Result<Var> {
        check_mask("encode_performance", correct.len(), mask)?;
        let r = column(tape, correct.iter().map(|&c| if c { T::one() } else { T::zero() }))?;
        let y = self.map.apply(tape, store, r)?;
        tape.mask_rows(y, mask)
    }
}

/// Gap between consecutive valid positions; the first valid position and
/// all padding get 0. Valid timestamps must ascend and precede `as_of`.
pub fn history_deltas(timestamps: &[Timestamp], mask: &[bool], as_of: Timestamp) -> Result<Vec<i64>> {
    check_mask("history_deltas", timestamps.len(), mask)?;
    let mut prev: Option<Timestamp> = None;
    let mut out = Vec::with_capacity(timestamps.len());
    for (&t, &m) in timestamps.iter().zip(mask) {
        if !m {
            out.push(0);
            continue;
        }
        if t >= as_of {
            return Err(Error::Contract(format!("history timestamp {t} is not before {as_of}")));
        }
        let dt = match prev {
            Some(p) if t < p => {
                return Err(Error::Contract(format!("history timestamps descend ({p} then {t})")));
            }
            Some(p) => t - p,
            None => 0,
        };
        prev = Some(t);
        out.push(dt);
    }
    Ok(out)
}

/// Log-damped interval in days, `ln(1 + Δt / 86400)`.
pub fn damped_interval(dt: i64) -> f64 {
    (dt as f64 / DAY as f64).ln_1p()
}

/// Short/long interval branches sharing one output projection.
#[derive(Clone, Copy, Debug)]
pub struct DualTimeEncoder {
    pub short: ScalarAffine,
    /// `None` collapses both regimes onto the short branch.
    pub long: Option<ScalarAffine>,
    pub mix_weight: ParamId,
    pub mix_bias: ParamId,
    /// Intervals `≤ threshold` seconds use the short branch.
    pub threshold: i64,
}

impl DualTimeEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        threshold: i64,
        dual: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let short = ScalarAffine::new(store, &format!("{name}.short"), dim, rng);
        let long = dual.then(|| ScalarAffine::new(store, &format!("{name}.long"), dim, rng));
        Self {
            short,
            long,
            mix_weight: store.add_weight(&format!("{name}.mix.weight"), dim, dim, rng),
            mix_bias: store.add_bias(&format!("{name}.mix.bias"), dim),
            threshold,
        }
    }

    /// Encodes precomputed gaps (seconds), one per row.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, deltas: &[i64], mask: &[bool]) -> Result<Var> {
        check_mask("encode_time", deltas.len(), mask)?;
        let u = column(tape, deltas.iter().map(|&d| T::from_f64_lossy(damped_interval(d))))?;
        let short = self.short.apply(tape, store, u)?;
        let h = match &self.long {
            Some(long) => {
                let long = long.apply(tape, store, u)?;
                let is_short: Vec<bool> = deltas.iter().map(|&d| d <= self.threshold).collect();
                tape.select_rows(&is_short, short, long)?
            }
            None => short,
        };
        let h = tape.relu(h)?;
        let w = tape.param(store, self.mix_weight)?;
        let b = tape.param(store, self.mix_bias)?;
        let x = tape.affine(h, w, b)?;
        tape.mask_rows(x, mask)
    }

    /// Single-sequence form: gaps are taken between consecutive valid
    /// timestamps.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        timestamps: &[Timestamp],
        mask: &[bool],
        as_of: Timestamp,
    ) -> Result<Var> {
        let deltas = history_deltas(timestamps, mask, as_of)?;
        self.forward(tape, store, &deltas, mask)
    }
}

/// Overlap of each history position with the link being predicted.
///
/// Student histories score `[question matches] + [concept matches]`
/// (0, 1 or 2); question histories score `[student matches]`.
pub fn multiset_flags(seq: &NeighborSequence, question: QuestionId, concept: ConceptId, student: StudentId) -> Vec<u8> {
    seq.entries
        .iter()
        .zip(&seq.valid_mask)
        .map(|(e, &valid)| {
            if !valid {
                return 0;
            }
            match seq.owner_kind {
                NodeKind::Student => u8::from(e.counterpart == question.0) + u8::from(e.concept == concept),
                NodeKind::Question => u8::from(e.counterpart == student.0),
            }
        })
        .collect()
}

/// `W_m·h + b_m` over the overlap flags.
#[derive(Clone, Copy, Debug)]
pub struct MultisetIndicator {
    pub map: ScalarAffine,
}

impl MultisetIndicator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            map: ScalarAffine::new(store, "multiset", dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, flags: &[u8], mask: &[bool]) -> Result<Var> {
        check_mask("encode_multiset", flags.len(), mask)?;
        if let Some(&f) = flags.iter().find(|&&f| f > 2) {
            return Err(Error::Contract(format!("multiset flag {f} outside 0..=2")));
        }
        let h = column(tape, flags.iter().map(|&f| T::from_u8(f).expect("small int")))?;
        let y = self.map.apply(tape, store, h)?;
        tape.mask_rows(y, mask)
    }
}

/// Learned table indexed by concept id.
#[derive(Clone, Copy, Debug)]
pub struct ConceptEmbedding {
    pub table: ParamId,
    pub count: usize,
}

impl ConceptEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        // Rows are looked up, not multiplied, so fan-in is 1.
        let bound = 1.0;
        let data = (0..count * dim).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
        let value = Tensor::new(vec![count, dim], data).expect("shape");
        let table = store.add(crate::param::Parameter::new(name, value, true));
        Self { table, count }
    }

    /// `None` rows are padding and come out zero.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[Option<usize>]) -> Result<Var> {
        let table = tape.param(store, self.table)?;
        tape.gather_rows(table, ids)
    }
}
