//! Continuous-time interaction graph: an append-only, time-sorted event log
//! with per-node adjacency indices.

mod ingest;
mod snapshot;
mod split;
mod stats;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{ingest_csv, ingest_records, ColumnNames, RawRecord};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use split::{plan_split, SplitPlan};
pub use stats::{interval_stats, repeat_stats, IntervalHistogram, RepeatStats, DEFAULT_BUCKET_EDGES, DAY};

/// Seconds since the epoch.
pub type Timestamp = i64;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub usize);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(StudentId);
id_type!(QuestionId);
id_type!(ConceptId);

/// One answer: an edge of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub student: StudentId,
    pub question: QuestionId,
    pub timestamp: Timestamp,
    pub correct: bool,
    pub concept: ConceptId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Student,
    Question,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Student => "student",
            Self::Question => "question",
        }
    }
}

/// Original identifiers of the dense node ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeLabels {
    pub students: Vec<String>,
    pub questions: Vec<String>,
    pub concepts: Vec<String>,
}

impl NodeLabels {
    fn numbered(students: usize, questions: usize, concepts: usize) -> Self {
        let n = |k: usize| (0..k).map(|i| i.to_string()).collect();
        Self {
            students: n(students),
            questions: n(questions),
            concepts: n(concepts),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCounts {
    pub students: usize,
    pub questions: usize,
    pub concepts: usize,
    pub interactions: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicGraph {
    events: Vec<Interaction>,
    student_adj: Vec<Vec<usize>>,
    question_adj: Vec<Vec<usize>>,
    num_concepts: usize,
    labels: NodeLabels,
}

impl DynamicGraph {
    /// Builds a graph from already-dense ids. Events must be in
    /// non-decreasing time order; node counts are `max id + 1` unless larger
    /// counts are given.
    pub fn new(events: Vec<Interaction>) -> Result<Self> {
        let students = events.iter().map(|e| e.student.0 + 1).max().unwrap_or(0);
        let questions = events.iter().map(|e| e.question.0 + 1).max().unwrap_or(0);
        let concepts = events.iter().map(|e| e.concept.0 + 1).max().unwrap_or(0);
        Self::with_counts(events, students, questions, concepts, None)
    }

    pub(crate) fn with_counts(
        events: Vec<Interaction>,
        students: usize,
        questions: usize,
        concepts: usize,
        labels: Option<NodeLabels>,
    ) -> Result<Self> {
        if let Some(w) = events.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Contract(format!("events {} and {} are out of time order", w, w + 1)));
        }
        let mut student_adj = vec![Vec::new(); students];
        let mut question_adj = vec![Vec::new(); questions];
        for (i, e) in events.iter().enumerate() {
            let s = student_adj.get_mut(e.student.0).ok_or(Error::OutOfRange {
                what: "students",
                index: e.student.0,
                len: students,
            })?;
            s.push(i);
            let q = question_adj.get_mut(e.question.0).ok_or(Error::OutOfRange {
                what: "questions",
                index: e.question.0,
                len: questions,
            })?;
            q.push(i);
            if e.concept.0 >= concepts {
                return Err(Error::OutOfRange {
                    what: "concepts",
                    index: e.concept.0,
                    len: concepts,
                });
            }
        }
        let labels = labels.unwrap_or_else(|| NodeLabels::numbered(students, questions, concepts));
        Ok(Self {
            events,
            student_adj,
            question_adj,
            num_concepts: concepts,
            labels,
        })
    }

    /// Convenience constructor from `(student, question, timestamp, correct, concept)` tuples.
    pub fn from_tuples(rows: &[(usize, usize, Timestamp, bool, usize)]) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|&(s, q, t, r, k)| Interaction {
                    student: StudentId(s),
                    question: QuestionId(q),
                    timestamp: t,
                    correct: r,
                    concept: ConceptId(k),
                })
                .collect(),
        )
    }

    pub fn events(&self) -> &[Interaction] {
        &self.events
    }

    pub fn event(&self, index: usize) -> &Interaction {
        &self.events[index]
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_students(&self) -> usize {
        self.student_adj.len()
    }

    pub fn num_questions(&self) -> usize {
        self.question_adj.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn counts(&self) -> GraphCounts {
        GraphCounts {
            students: self.num_students(),
            questions: self.num_questions(),
            concepts: self.num_concepts,
            interactions: self.events.len(),
        }
    }

    pub fn labels(&self) -> &NodeLabels {
        &self.labels
    }

    pub fn student_events(&self, s: StudentId) -> &[usize] {
        &self.student_adj[s.0]
    }

    pub fn question_events(&self, q: QuestionId) -> &[usize] {
        &self.question_adj[q.0]
    }

    pub fn student_by_label(&self, label: &str) -> Option<StudentId> {
        self.labels.students.iter().position(|l| l == label).map(StudentId)
    }

    pub fn question_by_label(&self, label: &str) -> Option<QuestionId> {
        self.labels.questions.iter().position(|l| l == label).map(QuestionId)
    }

    /// The first `len` events with node counts and labels unchanged.
    pub fn prefix(&self, len: usize) -> Self {
        let len = len.min(self.events.len());
        let events = self.events[..len].to_vec();
        let cut = |adj: &[Vec<usize>]| -> Vec<Vec<usize>> {
            adj.iter().map(|l| l.iter().copied().take_while(|&i| i < len).collect()).collect()
        };
        Self {
            events,
            student_adj: cut(&self.student_adj),
            question_adj: cut(&self.question_adj),
            num_concepts: self.num_concepts,
            labels: self.labels.clone(),
        }
    }

    /// Rows that re-ingest into an identical graph.
    pub fn to_records(&self) -> Vec<RawRecord> {
        self.events
            .iter()
            .enumerate()
            .map(|(i, e)| RawRecord {
                student: self.labels.students[e.student.0].clone(),
                question: self.labels.questions[e.question.0].clone(),
                timestamp: e.timestamp,
                correct: e.correct,
                concept: self.labels.concepts[e.concept.0].clone(),
                line: i as u64 + 2,
            })
            .collect()
    }

    fn adjacency(&self, node: usize, kind: NodeKind) -> Result<&[usize]> {
        let adj = match kind {
            NodeKind::Student => &self.student_adj,
            NodeKind::Question => &self.question_adj,
        };
        adj.get(node).map(Vec::as_slice).ok_or_else(|| Error::UnknownNode {
            kind: kind.as_str(),
            id: node.to_string(),
        })
    }

    /// The latest `n` events of `node` strictly before `as_of`, skipping
    /// `exclude_event`, left-padded to length `n`.
    pub fn recent_neighbors(
        &self,
        node: usize,
        kind: NodeKind,
        as_of: Timestamp,
        exclude_event: Option<usize>,
        n: usize,
    ) -> Result<NeighborSequence> {
        if n == 0 {
            return Err(Error::Contract("neighbor sequence length must be at least 1".into()));
        }
        let adj = self.adjacency(node, kind)?;
        let cut = adj.partition_point(|&i| self.events[i].timestamp < as_of);
        let picked: Vec<usize> = adj[..cut]
            .iter()
            .rev()
            .copied()
            .filter(|&i| Some(i) != exclude_event)
            .take(n)
            .collect();
        let pad = n - picked.len();
        let mut entries = vec![NeighborEntry::PADDING; pad];
        entries.extend(picked.iter().rev().map(|&i| {
            let e = &self.events[i];
            NeighborEntry {
                event: Some(i),
                counterpart: match kind {
                    NodeKind::Student => e.question.0,
                    NodeKind::Question => e.student.0,
                },
                timestamp: e.timestamp,
                correct: e.correct,
                concept: e.concept,
            }
        }));
        let mut valid_mask = vec![false; pad];
        valid_mask.resize(n, true);
        Ok(NeighborSequence {
            entries,
            valid_mask,
            owner: node,
            owner_kind: kind,
            as_of,
        })
    }
}

/// One history position. Padding entries are all zero with `event: None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborEntry {
    pub event: Option<usize>,
    /// Question id in a student's history, student id in a question's.
    pub counterpart: usize,
    pub timestamp: Timestamp,
    pub correct: bool,
    pub concept: ConceptId,
}

impl NeighborEntry {
    pub const PADDING: Self = Self {
        event: None,
        counterpart: 0,
        timestamp: 0,
        correct: false,
        concept: ConceptId(0),
    };
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSequence {
    pub entries: Vec<NeighborEntry>,
    pub valid_mask: Vec<bool>,
    pub owner: usize,
    pub owner_kind: NodeKind,
    pub as_of: Timestamp,
}

impl NeighborSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_entries(&self) -> impl Iterator<Item = &NeighborEntry> {
        self.entries.iter().zip(&self.valid_mask).filter(|(_, &m)| m).map(|(e, _)| e)
    }
}

/// Consecutive `batch_size` slices of `range` in time order; the last may be
/// short and an empty range yields nothing.
pub fn chronological_batches(range: Range<usize>, batch_size: usize) -> Result<impl Iterator<Item = Range<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let end = range.end;
    Ok(range.step_by(batch_size).map(move |start| start..(start + batch_size).min(end)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(seed: u64, events: usize, students: usize, questions: usize) -> DynamicGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 1_000;
        let rows: Vec<_> = (0..events)
            .map(|_| {
                t += rng.random_range(0..3);
                let q = rng.random_range(0..questions);
                (rng.random_range(0..students), q, t, rng.random_bool(0.5), q % 3)
            })
            .collect();
        DynamicGraph::from_tuples(&rows).unwrap()
    }

    // Filter, sort, truncate: the definition written out directly.
    fn brute_force_history(g: &DynamicGraph, s: usize, as_of: Timestamp, exclude: Option<usize>, n: usize) -> Vec<usize> {
        let mut hits: Vec<usize> = (0..g.len())
            .filter(|&i| g.event(i).student.0 == s && g.event(i).timestamp < as_of && Some(i) != exclude)
            .collect();
        hits.sort_by_key(|&i| (g.event(i).timestamp, i));
        let skip = hits.len().saturating_sub(n);
        hits[skip..].to_vec()
    }

    #[test]
    fn empty_history_is_all_padding() {
        let g = DynamicGraph::from_tuples(&[(0, 0, 10, true, 0)]).unwrap();
        let seq = g.recent_neighbors(0, NodeKind::Student, 10, Some(0), 4).unwrap();
        assert!(seq.valid_mask.iter().all(|m| !m));
        assert!(seq.entries.iter().all(|e| *e == NeighborEntry::PADDING));
    }

    #[test]
    fn short_history_is_left_padded() {
        let g = DynamicGraph::from_tuples(&[
            (0, 0, 1, true, 0),
            (0, 1, 2, false, 0),
            (0, 2, 3, true, 1),
            (0, 3, 4, true, 1),
        ])
        .unwrap();
        let seq = g.recent_neighbors(0, NodeKind::Student, 4, Some(3), 5).unwrap();
        assert_eq!(seq.valid_mask, vec![false, false, true, true, true]);
        let qs: Vec<_> = seq.valid_entries().map(|e| e.counterpart).collect();
        assert_eq!(qs, vec![0, 1, 2]);
    }

    #[test]
    fn long_history_keeps_latest_five() {
        let rows: Vec<_> = (0..8).map(|i| (0, i, i as i64 + 1, true, 0)).collect();
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let seq = g.recent_neighbors(0, NodeKind::Student, 8, Some(7), 5).unwrap();
        let evs: Vec<_> = seq.entries.iter().map(|e| e.event.unwrap()).collect();
        assert_eq!(evs, vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn matches_brute_force_on_random_graph() {
        let g = random_graph(7, 400, 6, 15);
        for target in (0..g.len()).step_by(7) {
            let e = *g.event(target);
            for n in [1, 3, 5, 20] {
                let seq = g.recent_neighbors(e.student.0, NodeKind::Student, e.timestamp, Some(target), n).unwrap();
                let got: Vec<_> = seq.valid_entries().map(|x| x.event.unwrap()).collect();
                assert_eq!(got, brute_force_history(&g, e.student.0, e.timestamp, Some(target), n));
                assert!(seq.valid_entries().all(|x| x.timestamp < e.timestamp));
            }
        }
    }

    #[test]
    fn same_timestamp_siblings_are_excluded() {
        let g = DynamicGraph::from_tuples(&[(0, 0, 5, true, 0), (0, 1, 5, false, 0), (0, 2, 6, true, 0)]).unwrap();
        let seq = g.recent_neighbors(0, NodeKind::Student, 5, Some(1), 3).unwrap();
        assert_eq!(seq.num_valid(), 0);
        let seq = g.recent_neighbors(0, NodeKind::Student, 6, Some(2), 3).unwrap();
        assert_eq!(seq.num_valid(), 2);
    }

    #[test]
    fn history_ignores_future_events() {
        let g = random_graph(3, 300, 4, 10);
        let prefix = g.prefix(150);
        for target in 0..150 {
            let e = *g.event(target);
            for kind in [NodeKind::Student, NodeKind::Question] {
                let node = if kind == NodeKind::Student { e.student.0 } else { e.question.0 };
                let full = g.recent_neighbors(node, kind, e.timestamp, Some(target), 8).unwrap();
                let short = prefix.recent_neighbors(node, kind, e.timestamp, Some(target), 8).unwrap();
                assert_eq!(full, short);
            }
        }
    }

    #[test]
    fn unknown_node_is_an_error() {
        let g = DynamicGraph::from_tuples(&[(0, 0, 1, true, 0)]).unwrap();
        assert!(matches!(
            g.recent_neighbors(5, NodeKind::Question, 2, None, 3),
            Err(Error::UnknownNode { kind: "question", .. })
        ));
    }

    #[test]
    fn batches_cover_range_in_order() {
        let b: Vec<_> = chronological_batches(0..5, 2).unwrap().collect();
        assert_eq!(b, vec![0..2, 2..4, 4..5]);
        assert_eq!(chronological_batches(0..2000, 2000).unwrap().count(), 1);
        assert_eq!(chronological_batches(3..3, 4).unwrap().count(), 0);
        let flat: Vec<usize> = chronological_batches(10..37, 4).unwrap().flatten().collect();
        assert_eq!(flat, (10..37).collect::<Vec<_>>());
        assert!(chronological_batches(0..3, 0).is_err());
    }

    #[test]
    fn adjacency_partitions_events() {
        let g = random_graph(11, 200, 5, 9);
        let mut seen = vec![0u8; g.len()];
        for s in 0..g.num_students() {
            let adj = g.student_events(StudentId(s));
            assert!(adj.windows(2).all(|w| w[0] < w[1]));
            for &i in adj {
                assert_eq!(g.event(i).student.0, s);
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
