//! Binary cache of an ingested graph.
//!
//! Layout (little endian): magic `DYGKTGR\0`, `u32` version, `u64` counts for
//! students, questions, concepts and events, then every event as
//! `u64 student, u64 question, i64 timestamp, u8 correct, u64 concept`, then
//! the three label tables as length-prefixed UTF-8 strings.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{ConceptId, DynamicGraph, Interaction, NodeLabels, QuestionId, StudentId};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"DYGKTGR\0";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(g: &DynamicGraph, mut w: W) -> Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    for n in [g.num_students(), g.num_questions(), g.num_concepts(), g.len()] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for e in g.events() {
        w.write_all(&(e.student.0 as u64).to_le_bytes())?;
        w.write_all(&(e.question.0 as u64).to_le_bytes())?;
        w.write_all(&e.timestamp.to_le_bytes())?;
        w.write_all(&[u8::from(e.correct)])?;
        w.write_all(&(e.concept.0 as u64).to_le_bytes())?;
    }
    let labels = g.labels();
    for table in [&labels.students, &labels.questions, &labels.concepts] {
        for s in table {
            w.write_all(&(s.len() as u64).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("graph snapshot is truncated".into()))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.usize()?;
        if len > 1 << 20 {
            return Err(Error::Format("label length is implausible".into()));
        }
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("graph snapshot is truncated".into()))?;
        String::from_utf8(buf).map_err(|_| Error::Format("label is not UTF-8".into()))
    }
}

pub fn read_snapshot<R: Read>(r: R) -> Result<DynamicGraph> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a graph snapshot (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let (students, questions, concepts, n) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let mut events = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let student = StudentId(r.usize()?);
        let question = QuestionId(r.usize()?);
        let timestamp = i64::from_le_bytes(r.bytes()?);
        let correct = match r.bytes::<1>()?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("response byte {b} is not binary"))),
        };
        let concept = ConceptId(r.usize()?);
        events.push(Interaction {
            student,
            question,
            timestamp,
            correct,
            concept,
        });
    }
    let mut table = |len: usize| -> Result<Vec<String>> { (0..len).map(|_| r.string()).collect() };
    let labels = NodeLabels {
        students: table(students)?,
        questions: table(questions)?,
        concepts: table(concepts)?,
    };
    DynamicGraph::with_counts(events, students, questions, concepts, Some(labels))
        .map_err(|e| Error::Format(format!("corrupt snapshot: {e}")))
}
