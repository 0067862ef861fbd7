//! Event sequences, datasets, and JSON Lines persistence.
//!
//! A dataset file holds one sequence per line:
//!
//! ```text
//! {"id": "seq-001", "events": [{"t": 0.41, "c": 2}, ...], "label": 0}
//! ```
//!
//! The number of event types and the shared horizon live in a sidecar header
//! `<stem>.header.json` (`{"num_types": 5, "horizon": 50.0}`) or are supplied
//! by the caller. When both are present they must agree.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A single event: timestamp in seconds and a 0-based type id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(rename = "c")]
    pub type_id: usize,
}

impl Event {
    pub fn new(time: f64, type_id: usize) -> Self {
        Event { time, type_id }
    }
}

/// Strictly time-ordered events on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    id: String,
    events: Vec<Event>,
    horizon: f64,
    label: Option<usize>,
}

impl EventSequence {
    /// Validates ordering, bounds and non-emptiness. Type ids are checked
    /// against the dataset's type count in [`Dataset::new`].
    pub fn new(id: impl Into<String>, events: Vec<Event>, horizon: f64, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        let fail = |rule: String| Error::InvalidSequence { id: id.clone(), rule };
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(fail(format!("horizon {horizon} must be finite and positive")));
        }
        if events.is_empty() {
            return Err(fail("sequence has no events".into()));
        }
        for (n, e) in events.iter().enumerate() {
            if !(e.time.is_finite() && e.time >= 0.0) {
                return Err(fail(format!("event {n} has time {} (must be finite and nonnegative)", e.time)));
            }
            if e.time > horizon {
                return Err(fail(format!("event {n} at time {} exceeds horizon {horizon}", e.time)));
            }
            if n > 0 && e.time <= events[n - 1].time {
                return Err(fail(format!(
                    "event {n} at time {} does not strictly follow time {}",
                    e.time,
                    events[n - 1].time
                )));
            }
        }
        Ok(EventSequence {
            id,
            events,
            horizon,
            label,
        })
    }

    #[inline]
    pub fn id(&self) -> &str {
        &self.id
    }

    #[inline]
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn label(&self) -> Option<usize> {
        self.label
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.events.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }
}

/// Sidecar metadata shared by every sequence of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub num_types: usize,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sequences: Vec<EventSequence>,
    num_types: usize,
    horizon: f64,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize, horizon: f64) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::InvalidDataset("num_types must be at least 1".into()));
        }
        if sequences.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "a dataset needs at least 2 sequences, got {}",
                sequences.len()
            )));
        }
        for s in &sequences {
            if s.horizon != horizon {
                return Err(Error::InvalidSequence {
                    id: s.id.clone(),
                    rule: format!("horizon {} differs from dataset horizon {horizon}", s.horizon),
                });
            }
            if let Some((n, e)) = s.events.iter().enumerate().find(|(_, e)| e.type_id >= num_types) {
                return Err(Error::InvalidSequence {
                    id: s.id.clone(),
                    rule: format!("event {n} has type {} but num_types is {num_types}", e.type_id),
                });
            }
        }
        Ok(Dataset {
            sequences,
            num_types,
            horizon,
        })
    }

    #[inline]
    pub fn sequences(&self) -> &[EventSequence] {
        &self.sequences
    }

    #[inline]
    pub fn num_types(&self) -> usize {
        self.num_types
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            num_types: self.num_types,
            horizon: self.horizon,
        }
    }

    /// Ground-truth labels, if every sequence carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.sequences.iter().map(EventSequence::label).collect()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Vec<EventSequence> {
        indices.iter().map(|&i| self.sequences[i].clone()).collect()
    }
}

/// `(C+1)`-dimensional event vector: time followed by a one-hot type, with
/// per-coordinate maxima `bounds` (`horizon`, then ones).
#[derive(Clone, Debug, PartialEq)]
pub struct EventVector<T> {
    pub coords: Vec<T>,
    pub bounds: Vec<T>,
}

pub fn to_event_vector<T: Scalar>(event: &Event, num_types: usize, horizon: f64) -> EventVector<T> {
    debug_assert!(event.type_id < num_types);
    let mut coords = vec![T::zero(); num_types + 1];
    coords[0] = T::lit(event.time);
    coords[1 + event.type_id] = T::one();
    let mut bounds = vec![T::one(); num_types + 1];
    bounds[0] = T::lit(horizon);
    EventVector { coords, bounds }
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    id: String,
    events: Vec<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

/// `data.jsonl` -> `data.header.json`.
pub fn header_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("header.json")
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads a JSONL dataset. The header comes from the sidecar file, from
/// `header`, or both (in which case they must agree).
pub fn load_dataset(path: &Path, header: Option<DatasetHeader>) -> Result<Dataset> {
    let sidecar_path = header_path(path);
    let sidecar = if sidecar_path.exists() {
        Some(read_header(&sidecar_path)?)
    } else {
        None
    };
    let header = match (sidecar, header) {
        (Some(a), Some(b)) => {
            if a.num_types != b.num_types || a.horizon != b.horizon {
                return Err(Error::Config(format!(
                    "header {} (num_types={}, horizon={}) disagrees with supplied num_types={}, horizon={}",
                    sidecar_path.display(),
                    a.num_types,
                    a.horizon,
                    b.num_types,
                    b.horizon
                )));
            }
            a
        }
        (Some(h), None) | (None, Some(h)) => h,
        (None, None) => {
            return Err(Error::Config(format!(
                "no dataset header: expected {} or explicit num_types/horizon",
                sidecar_path.display()
            )))
        }
    };

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sequences = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        sequences.push(EventSequence::new(record.id, record.events, header.horizon, record.label)?);
    }
    Dataset::new(sequences, header.num_types, header.horizon)
}

/// Writes `path` as JSONL and the header next to it.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.sequences {
        let record = SequenceRecord {
            id: s.id.clone(),
            events: s.events.clone(),
            label: s.label,
        };
        serde_json::to_writer(&mut w, &record).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let hp = header_path(path);
    let text = serde_json::to_string_pretty(&dataset.header()).expect("header serializes");
    std::fs::write(&hp, text).map_err(|e| Error::io(&hp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, times: &[(f64, usize)], label: Option<usize>) -> EventSequence {
        let events = times.iter().map(|&(t, c)| Event::new(t, c)).collect();
        EventSequence::new(id, events, 10.0, label).unwrap()
    }

    #[test]
    fn event_vector_examples() {
        let v = to_event_vector::<f64>(&Event::new(1.0, 1), 3, 10.0);
        assert_eq!(v.coords, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(v.bounds, vec![10.0, 1.0, 1.0, 1.0]);

        let v = to_event_vector::<f64>(&Event::new(0.0, 0), 1, 5.0);
        assert_eq!(v.coords, vec![0.0, 1.0]);
        assert_eq!(v.bounds, vec![5.0, 1.0]);

        let v = to_event_vector::<f32>(&Event::new(5.0, 2), 3, 5.0);
        assert_eq!(v.coords, vec![5.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sequence_invariants() {
        let bad = |events: Vec<Event>| EventSequence::new("s", events, 10.0, None).is_err();
        assert!(bad(vec![]));
        assert!(bad(vec![Event::new(11.0, 0)]));
        assert!(bad(vec![Event::new(-1.0, 0)]));
        assert!(bad(vec![Event::new(f64::NAN, 0)]));
        assert!(bad(vec![Event::new(1.0, 0), Event::new(1.0, 1)]));
        assert!(bad(vec![Event::new(2.0, 0), Event::new(1.0, 1)]));
        assert!(!bad(vec![Event::new(0.0, 0), Event::new(10.0, 1)]));
    }

    #[test]
    fn dataset_invariants() {
        let a = seq("a", &[(1.0, 0)], None);
        assert!(Dataset::new(vec![a.clone()], 2, 10.0).is_err());
        let b = seq("b", &[(1.0, 2)], None);
        let err = Dataset::new(vec![a.clone(), b], 2, 10.0).unwrap_err();
        assert!(err.to_string().contains("sequence b"), "{err}");
        let c = seq("c", &[(1.0, 1)], None);
        assert_eq!(Dataset::new(vec![a, c], 2, 10.0).unwrap().len(), 2);
    }

    #[test]
    fn load_reports_time_beyond_horizon() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"ok\",\"events\":[{\"t\":1.0,\"c\":0}]}\n{\"id\":\"late\",\"events\":[{\"t\":12.0,\"c\":0}]}\n",
        )
        .unwrap();
        let err = load_dataset(&p, Some(DatasetHeader { num_types: 1, horizon: 10.0 })).unwrap_err();
        match err {
            Error::InvalidSequence { id, rule } => {
                assert_eq!(id, "late");
                assert!(rule.contains("exceeds horizon"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn load_reports_parse_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"id\":\"ok\",\"events\":[{\"t\":1.0,\"c\":0}]}\n{not json}\n").unwrap();
        let err = load_dataset(&p, Some(DatasetHeader { num_types: 1, horizon: 10.0 })).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn header_sources_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ds = Dataset::new(vec![seq("a", &[(1.0, 0)], None), seq("b", &[(2.0, 1)], None)], 2, 10.0).unwrap();
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p, None).unwrap(), ds);
        assert_eq!(load_dataset(&p, Some(ds.header())).unwrap(), ds);
        let err = load_dataset(&p, Some(DatasetHeader { num_types: 3, horizon: 10.0 })).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        std::fs::remove_file(header_path(&p)).unwrap();
        assert!(matches!(load_dataset(&p, None).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn label_key_presence_follows_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let unlabeled = Dataset::new(vec![seq("a", &[(1.0, 0)], None), seq("b", &[(2.0, 0)], None)], 1, 10.0).unwrap();
        let p = dir.path().join("u.jsonl");
        save_dataset(&unlabeled, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| !l.contains("\"label\"")));

        let labeled = Dataset::new(vec![seq("a", &[(1.0, 0)], Some(0)), seq("b", &[(2.0, 0)], Some(1))], 1, 10.0).unwrap();
        let p = dir.path().join("l.jsonl");
        save_dataset(&labeled, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().all(|l| l.contains("\"label\"")));
        assert_eq!(load_dataset(&p, None).unwrap().labels(), Some(vec![0, 1]));
    }
}
