//! Synthetic event streams with planted, learnable dynamics.
//!
//! * `concept-skill`: each student either masters or fails each concept.
//! * `repeat-guess`: first attempts are mostly wrong, retries of a question
//!   the student has already seen are mostly right.
//! * `forgetting`: mastery grows with practice; any gap longer than one day
//!   wipes it, gaps up to a day keep it.

use std::io::Write;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Timestamp, DAY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    ConceptSkill,
    Forgetting,
    RepeatGuess,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConceptSkill => "concept-skill",
            Self::Forgetting => "forgetting",
            Self::RepeatGuess => "repeat-guess",
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept-skill" => Ok(Self::ConceptSkill),
            "forgetting" => Ok(Self::Forgetting),
            "repeat-guess" => Ok(Self::RepeatGuess),
            other => Err(Error::Config(format!(
                "unknown pattern `{other}` (concept-skill, forgetting, repeat-guess)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub students: usize,
    pub questions: usize,
    pub concepts: usize,
    pub events: usize,
    pub pattern: Pattern,
    pub seed: u64,
}

/// Generative constants, echoed into the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    /// concept-skill: P(correct) for mastered / unmastered concepts.
    pub p_mastered: f64,
    pub p_unmastered: f64,
    /// repeat-guess: P(correct) on a first attempt and on any retry, and the
    /// chance that the next question is a retry of a recent one.
    pub p_first_attempt: f64,
    pub p_retry: f64,
    pub retry_rate: f64,
    pub retry_pool: usize,
    /// forgetting: `P(correct) = σ(gain·min(m, cap) + offset)` where `m` is
    /// the practice count since the last gap longer than `forget_threshold`.
    pub gain: f64,
    pub offset: f64,
    pub cap: usize,
    pub forget_threshold: i64,
    /// forgetting gaps: share of minute-scale bursts and of gaps just over
    /// the threshold; the rest fall just under it.
    pub burst_rate: f64,
    pub long_rate: f64,
    /// Width in seconds of the bands on either side of the threshold.
    pub band: i64,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self {
            p_mastered: 0.98,
            p_unmastered: 0.02,
            p_first_attempt: 0.3,
            p_retry: 0.9,
            retry_rate: 0.5,
            retry_pool: 8,
            gain: 0.8,
            offset: -2.4,
            cap: 6,
            forget_threshold: DAY,
            burst_rate: 0.4,
            long_rate: 0.2,
            band: 2 * 3_600,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthRow {
    pub student: usize,
    pub question: usize,
    pub timestamp: Timestamp,
    pub correct: bool,
    pub concept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: SynthConfig,
    pub params: PatternParams,
    pub start_time: Timestamp,
    pub question_concepts: Vec<usize>,
    pub description: String,
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub rows: Vec<SynthRow>,
    pub sidecar: Sidecar,
}

const START: Timestamp = 1_600_000_000;

fn draw_gap(pattern: Pattern, params: &PatternParams, rng: &mut impl Rng) -> i64 {
    match pattern {
        // Minutes to a few hours, with the occasional multi-day break.
        Pattern::ConceptSkill | Pattern::RepeatGuess => {
            if rng.random_bool(0.9) {
                rng.random_range(30..4 * 3_600)
            } else {
                rng.random_range(DAY..5 * DAY)
            }
        }
        // Besides short bursts, mass sits on both sides of the threshold so
        // the regime is decided close to it.
        Pattern::Forgetting => {
            let th = params.forget_threshold;
            let u: f64 = rng.random();
            if u < params.burst_rate {
                rng.random_range(30..1_800)
            } else if u < params.burst_rate + params.long_rate {
                rng.random_range(th + 1..th + params.band)
            } else {
                rng.random_range(th - params.band..=th)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    generate_with(cfg, PatternParams::default())
}

pub fn generate_with(cfg: &SynthConfig, params: PatternParams) -> Result<Synthetic> {
    if cfg.students == 0 || cfg.questions == 0 || cfg.concepts == 0 || cfg.events == 0 {
        return Err(Error::Config("synth sizes must all be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let question_concepts: Vec<usize> = (0..cfg.questions).map(|q| q % cfg.concepts).collect();
    let mastered: Vec<Vec<bool>> = (0..cfg.students)
        .map(|_| (0..cfg.concepts).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    let mut clock = vec![START; cfg.students];
    let mut started = vec![false; cfg.students];
    let mut recent: Vec<Vec<usize>> = vec![Vec::new(); cfg.students];
    let mut attempts = std::collections::HashMap::<(usize, usize), usize>::new();
    let mut practice = vec![0usize; cfg.students];

    let mut rows = Vec::with_capacity(cfg.events);
    for _ in 0..cfg.events {
        let s = rng.random_range(0..cfg.students);
        let gap = if started[s] { draw_gap(cfg.pattern, &params, &mut rng) } else { rng.random_range(0..3_600) };
        clock[s] += gap;
        let retry = cfg.pattern == Pattern::RepeatGuess && !recent[s].is_empty() && rng.random_bool(params.retry_rate);
        let q = if retry {
            *recent[s].choose(&mut rng).expect("non-empty")
        } else {
            rng.random_range(0..cfg.questions)
        };
        let k = question_concepts[q];
        let p = match cfg.pattern {
            Pattern::ConceptSkill => {
                if mastered[s][k] {
                    params.p_mastered
                } else {
                    params.p_unmastered
                }
            }
            Pattern::RepeatGuess => {
                if attempts.get(&(s, q)).copied().unwrap_or(0) == 0 {
                    params.p_first_attempt
                } else {
                    params.p_retry
                }
            }
            Pattern::Forgetting => {
                if started[s] && gap > params.forget_threshold {
                    practice[s] = 0;
                }
                sigmoid(params.gain * practice[s].min(params.cap) as f64 + params.offset)
            }
        };
        let correct = rng.random_bool(p);
        *attempts.entry((s, q)).or_insert(0) += 1;
        practice[s] += 1;
        started[s] = true;
        if !recent[s].contains(&q) {
            recent[s].push(q);
            if recent[s].len() > params.retry_pool {
                recent[s].remove(0);
            }
        }
        rows.push(SynthRow {
            student: s,
            question: q,
            timestamp: clock[s],
            correct,
            concept: k,
        });
    }
    // Per-student clocks advance independently; merge into global time order.
    rows.sort_by_key(|r| r.timestamp);

    let description = match cfg.pattern {
        Pattern::ConceptSkill => "per (student, concept) mastery drawn fair-coin; P(correct) = p_mastered or p_unmastered",
        Pattern::RepeatGuess => {
            "next question is a retry of one of the last retry_pool questions with prob retry_rate; \
             first attempts succeed with p_first_attempt, retries with p_retry"
        }
        Pattern::Forgetting => {
            "m counts practice since the last gap > forget_threshold seconds; \
             P(correct) = sigmoid(gain*min(m,cap)+offset)"
        }
    };
    Ok(Synthetic {
        rows,
        sidecar: Sidecar {
            config: cfg.clone(),
            params,
            start_time: START,
            question_concepts,
            description: description.to_string(),
        },
    })
}

/// Writes rows in the ingest schema with `s*`, `q*`, `k*` labels.
pub fn write_csv<W: Write>(rows: &[SynthRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["student_id", "question_id", "timestamp", "correct", "concept_id"])?;
    for r in rows {
        out.write_record([
            format!("s{}", r.student),
            format!("q{}", r.question),
            r.timestamp.to_string(),
            u8::from(r.correct).to_string(),
            format!("k{}", r.concept),
        ])?;
    }
    out.flush()?;
    Ok(())
}
