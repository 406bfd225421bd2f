use std::collections::HashMap;
use std::io::Read;

use crate::error::{Error, Result};

use super::{ConceptId, DynamicGraph, Interaction, NodeLabels, QuestionId, StudentId, Timestamp};

/// One parsed input row, ids still in their original spelling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub student: String,
    pub question: String,
    pub timestamp: Timestamp,
    pub correct: bool,
    pub concept: String,
    /// 1-based line number in the source (the header is line 1).
    pub line: u64,
}

/// Header names of the five required columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnNames {
    pub student: String,
    pub question: String,
    pub timestamp: String,
    pub correct: String,
    pub concept: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        Self {
            student: "student_id".into(),
            question: "question_id".into(),
            timestamp: "timestamp".into(),
            correct: "correct".into(),
            concept: "concept_id".into(),
        }
    }
}

impl ColumnNames {
    /// Parses `student,question,timestamp,correct,concept` header names.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<_> = spec.split(',').map(|s| s.trim().to_string()).collect();
        let [student, question, timestamp, correct, concept]: [String; 5] = parts
            .try_into()
            .map_err(|_| Error::Config(format!("expected five column names, got `{spec}`")))?;
        Ok(Self {
            student,
            question,
            timestamp,
            correct,
            concept,
        })
    }
}

/// First concept of a multi-concept cell (`a;b` or `a|b`).
fn first_concept(cell: &str) -> &str {
    cell.split([';', '|']).next().unwrap_or("").trim()
}

/// Reads a headed CSV and ingests it with [`ingest_records`].
pub fn ingest_csv<R: Read>(reader: R, columns: &ColumnNames, min_count: usize) -> Result<DynamicGraph> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Row {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let cols = [
        find(&columns.student)?,
        find(&columns.question)?,
        find(&columns.timestamp)?,
        find(&columns.correct)?,
        find(&columns.concept)?,
    ];
    let names = [
        &columns.student,
        &columns.question,
        &columns.timestamp,
        &columns.correct,
        &columns.concept,
    ];
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let mut cells = [""; 5];
        for (slot, (&c, name)) in cells.iter_mut().zip(cols.iter().zip(names)) {
            let v = row.get(c).map(str::trim).unwrap_or("");
            if v.is_empty() {
                return Err(Error::Row {
                    line,
                    message: format!("missing field `{name}`"),
                });
            }
            *slot = v;
        }
        let timestamp = cells[2].parse::<Timestamp>().map_err(|_| Error::Row {
            line,
            message: format!("timestamp `{}` is not an integer", cells[2]),
        })?;
        let correct = match cells[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Row {
                    line,
                    message: format!("correct must be 0 or 1, got `{other}`"),
                })
            }
        };
        let concept = first_concept(cells[4]);
        if concept.is_empty() {
            return Err(Error::Row {
                line,
                message: "empty concept".into(),
            });
        }
        records.push(RawRecord {
            student: cells[0].to_string(),
            question: cells[1].to_string(),
            timestamp,
            correct,
            concept: concept.to_string(),
            line,
        });
    }
    ingest_records(records, min_count)
}

/// Stable-sorts by time, drops students and questions with fewer than
/// `min_count` events until nothing changes, and remaps ids densely in order
/// of first appearance.
pub fn ingest_records(mut records: Vec<RawRecord>, min_count: usize) -> Result<DynamicGraph> {
    records.sort_by_key(|r| r.timestamp);

    loop {
        let mut per_student: HashMap<&str, usize> = HashMap::new();
        let mut per_question: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *per_student.entry(&r.student).or_default() += 1;
            *per_question.entry(&r.question).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| per_student[r.student.as_str()] >= min_count && per_question[r.question.as_str()] >= min_count)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
    if records.is_empty() {
        return Err(Error::EmptyGraph(min_count));
    }

    let mut labels = NodeLabels::default();
    let mut maps: [HashMap<String, usize>; 3] = Default::default();
    let mut dense = |which: usize, key: &str, out: &mut Vec<String>| -> usize {
        if let Some(&id) = maps[which].get(key) {
            return id;
        }
        let id = out.len();
        out.push(key.to_string());
        maps[which].insert(key.to_string(), id);
        id
    };
    let events: Vec<Interaction> = records
        .iter()
        .map(|r| Interaction {
            student: StudentId(dense(0, &r.student, &mut labels.students)),
            question: QuestionId(dense(1, &r.question, &mut labels.questions)),
            timestamp: r.timestamp,
            correct: r.correct,
            concept: ConceptId(dense(2, &r.concept, &mut labels.concepts)),
        })
        .collect();
    let (s, q, k) = (labels.students.len(), labels.questions.len(), labels.concepts.len());
    DynamicGraph::with_counts(events, s, q, k, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(body: &str) -> String {
        format!("student_id,question_id,timestamp,correct,concept_id\n{body}")
    }

    fn rec(s: &str, q: &str, t: i64) -> RawRecord {
        RawRecord {
            student: s.into(),
            question: q.into(),
            timestamp: t,
            correct: true,
            concept: "k".into(),
            line: 0,
        }
    }

    #[test]
    fn six_events_at_threshold_five_survive() {
        let rows: Vec<_> = (0..6).map(|t| rec("s", "q", t)).collect();
        let g = ingest_records(rows, 5).unwrap();
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn below_threshold_empties_the_graph() {
        let rows: Vec<_> = (0..4).map(|t| rec("s", "q", t)).collect();
        assert!(matches!(ingest_records(rows, 5), Err(Error::EmptyGraph(5))));
    }

    #[test]
    fn removal_cascades_to_a_fixed_point() {
        // c (1 event) goes first; z then drops to 4 answers and goes; b then
        // drops to 1 event and goes. A single pass would have kept b and z.
        let mut rows = Vec::new();
        let mut t = 0;
        let mut push = |s: &str, q: &str, n: usize| {
            for _ in 0..n {
                rows.push(rec(s, q, t));
                t += 1;
            }
        };
        push("a", "y", 5);
        push("b", "z", 4);
        push("b", "y", 1);
        push("c", "z", 1);
        let g = ingest_records(rows.clone(), 0).unwrap();
        assert_eq!(g.num_students(), 3);
        let g = ingest_records(rows, 5).unwrap();
        assert_eq!(g.labels().students, vec!["a".to_string()]);
        assert_eq!(g.labels().questions, vec!["y".to_string()]);
        assert_eq!(g.len(), 5);
    }

    #[test]
    fn ties_keep_input_order_and_ids_are_dense() {
        let text = csv("s9,q2,100,1,k1\ns3,q7,50,0,k2\ns9,q7,100,0,k1;k3\n");
        let g = ingest_csv(text.as_bytes(), &ColumnNames::default(), 0).unwrap();
        let evs = g.events();
        assert_eq!(evs[0].timestamp, 50);
        assert_eq!(g.labels().students, vec!["s3", "s9"]);
        assert_eq!(evs[1].question, QuestionId(1));
        assert_eq!(evs[2].question, QuestionId(0));
        assert_eq!(g.labels().concepts, vec!["k2", "k1"]);
        assert_eq!(evs[2].concept, ConceptId(1));
    }

    #[test]
    fn row_errors_carry_line_numbers() {
        let text = csv("a,b,1,1,k\na,b,2,2,k\n");
        match ingest_csv(text.as_bytes(), &ColumnNames::default(), 0) {
            Err(Error::Row { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("0 or 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = csv("a,b,,1,k\n");
        assert!(matches!(
            ingest_csv(text.as_bytes(), &ColumnNames::default(), 0),
            Err(Error::Row { line: 2, .. })
        ));
        let missing = "student_id,question_id,timestamp,correct\na,b,1,1\n";
        assert!(matches!(
            ingest_csv(missing.as_bytes(), &ColumnNames::default(), 0),
            Err(Error::Row { line: 1, .. })
        ));
    }

    #[test]
    fn reingesting_emitted_rows_is_identity() {
        let text = csv("s1,q1,5,1,a\ns2,q1,3,0,b\ns1,q2,3,1,a\ns2,q2,9,1,b\ns1,q1,9,0,a\ns2,q1,9,1,a\n");
        let g = ingest_csv(text.as_bytes(), &ColumnNames::default(), 2).unwrap();
        let again = ingest_records(g.to_records(), 2).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn custom_column_names() {
        let cols = ColumnNames::parse("user,item,time,ok,skill").unwrap();
        let text = "time,user,item,skill,ok\n4,u,i,s,1\n";
        let g = ingest_csv(text.as_bytes(), &cols, 0).unwrap();
        assert_eq!(g.event(0).timestamp, 4);
        assert!(ColumnNames::parse("a,b").is_err());
    }
}
