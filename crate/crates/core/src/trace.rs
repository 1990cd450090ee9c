//! Logit traces: the data model, the JSON-Lines file format, and seeded
//! splitting and batching.
//!
//! A trace file starts with a header line
//!
//! ```text
//! {"k": 10, "b": 2, "meta": {"mode": "cascade"}}
//! ```
//!
//! followed by one line per sample:
//!
//! ```text
//! {"id": 0, "label": 3, "logits": [[...K values...], [...K values...]]}
//! ```
//!
//! Exit 1 is the shallowest device branch and exit B the final cloud exit.
//! Logits are written with 17 significant digits so a parse of a serialized
//! dataset reproduces every value bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample: its ground-truth label and one logit vector per exit point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub sample_id: u64,
    pub label: usize,
    /// `logits[i]` holds the logits produced at exit `i + 1`.
    pub logits: Vec<Vec<f64>>,
}

impl LogitRecord {
    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    /// Logits at a 1-based exit number.
    pub fn exit_logits(&self, exit: usize) -> &[f64] {
        &self.logits[exit - 1]
    }

    fn check(&self, k: usize, b: usize) -> std::result::Result<(), String> {
        if self.logits.len() != b {
            return Err(format!(
                "sample {}: expected {b} logit vectors, found {}",
                self.sample_id,
                self.logits.len()
            ));
        }
        for (i, z) in self.logits.iter().enumerate() {
            if z.len() != k {
                return Err(format!(
                    "sample {}: exit {} has {} logits, expected {k}",
                    self.sample_id,
                    i + 1,
                    z.len()
                ));
            }
            if let Some(v) = z.iter().find(|v| !v.is_finite()) {
                return Err(format!(
                    "sample {}: exit {} has non-finite logit {v}",
                    self.sample_id,
                    i + 1
                ));
            }
        }
        if self.label >= k {
            return Err(format!(
                "sample {}: label {} out of range for {k} classes",
                self.sample_id, self.label
            ));
        }
        Ok(())
    }
}

/// An immutable, validated collection of [`LogitRecord`]s sharing the same
/// number of classes and exits.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    records: Vec<LogitRecord>,
    num_classes: usize,
    num_exits: usize,
    metadata: BTreeMap<String, String>,
}

impl TraceDataset {
    pub fn new(
        num_classes: usize,
        num_exits: usize,
        metadata: BTreeMap<String, String>,
        records: Vec<LogitRecord>,
    ) -> Result<Self> {
        check_dims(num_classes, num_exits).map_err(Error::InvalidDataset)?;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.check(num_classes, num_exits)
                .map_err(Error::InvalidDataset)?;
            if !seen.insert(r.sample_id) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate sample id {}",
                    r.sample_id
                )));
            }
        }
        Ok(Self {
            records,
            num_classes,
            num_exits,
            metadata,
        })
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.sample_id).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Logit vectors of every record at a 1-based exit number.
    pub fn exit_logits(&self, exit: usize) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.exit_logits(exit)).collect()
    }

    /// Projects the dataset onto a subset of its exits, given as 1-based exit
    /// numbers in the order they should appear. Used to compare cascades with
    /// fewer branches on the same samples.
    pub fn select_exits(&self, exits: &[usize]) -> Result<TraceDataset> {
        if exits.is_empty() {
            return Err(Error::arg("exit selection is empty"));
        }
        if let Some(&bad) = exits.iter().find(|&&e| e == 0 || e > self.num_exits) {
            return Err(Error::arg(format!(
                "exit {bad} out of range 1..={}",
                self.num_exits
            )));
        }
        let records = self
            .records
            .iter()
            .map(|r| LogitRecord {
                sample_id: r.sample_id,
                label: r.label,
                logits: exits.iter().map(|&e| r.logits[e - 1].clone()).collect(),
            })
            .collect();
        let mut metadata = self.metadata.clone();
        let list: Vec<String> = exits.iter().map(|e| e.to_string()).collect();
        metadata.insert("selected_exits".into(), list.join(","));
        TraceDataset::new(self.num_classes, exits.len(), metadata, records)
    }

    fn subset(&self, records: Vec<LogitRecord>) -> TraceDataset {
        TraceDataset {
            records,
            num_classes: self.num_classes,
            num_exits: self.num_exits,
            metadata: self.metadata.clone(),
        }
    }
}

fn check_dims(k: usize, b: usize) -> std::result::Result<(), String> {
    if k < 2 {
        return Err(format!("need at least 2 classes, got {k}"));
    }
    if b < 1 {
        return Err("need at least 1 exit".into());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Header {
    k: usize,
    b: usize,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: u64,
    label: usize,
    logits: Vec<Vec<f64>>,
}

/// Parses a JSON-Lines trace. Any malformed or inconsistent line fails the
/// whole parse; the error carries the 1-based line number.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<TraceDataset> {
    let mut header: Option<(usize, Header)> = None;
    let mut records = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((_, head)) = &header else {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| Error::parse(lineno, format!("bad header: {e}")))?;
            check_dims(h.k, h.b).map_err(|m| Error::parse(lineno, m))?;
            header = Some((lineno, h));
            continue;
        };
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let record = LogitRecord {
            sample_id: raw.id,
            label: raw.label,
            logits: raw.logits,
        };
        record
            .check(head.k, head.b)
            .map_err(|m| Error::parse(lineno, m))?;
        if !seen.insert(record.sample_id) {
            return Err(Error::parse(
                lineno,
                format!("duplicate sample id {}", record.sample_id),
            ));
        }
        records.push(record);
    }

    let (_, head) = header.ok_or_else(|| Error::parse(1, "missing header line"))?;
    Ok(TraceDataset {
        records,
        num_classes: head.k,
        num_exits: head.b,
        metadata: head.meta,
    })
}

/// Writes `dataset` in the JSON-Lines trace format.
pub fn write_trace<W: Write>(dataset: &TraceDataset, mut out: W) -> Result<()> {
    let header = Header {
        k: dataset.num_classes,
        b: dataset.num_exits,
        meta: dataset.metadata.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;

    let mut line = String::new();
    for r in &dataset.records {
        line.clear();
        let _ = write!(
            line,
            "{{\"id\":{},\"label\":{},\"logits\":[",
            r.sample_id, r.label
        );
        for (i, z) in r.logits.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push('[');
            for (j, v) in z.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{v:.16e}");
            }
            line.push(']');
        }
        line.push_str("]}\n");
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Serializes `dataset` into an in-memory byte buffer.
pub fn serialize_trace(dataset: &TraceDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(dataset, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// A validation/test partition of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub validation: TraceDataset,
    pub test: TraceDataset,
    pub seed: u64,
}

/// Shuffles the records with a ChaCha8 stream seeded by `seed`, then takes the
/// first `round(fraction * N)` records as the validation side and the rest as
/// the test side.
pub fn split_dataset(
    dataset: &TraceDataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::arg(format!("cannot split {n} records")));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::arg(format!(
            "validation fraction {validation_fraction} not in (0, 1)"
        )));
    }
    let n_val = (validation_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::arg(format!(
            "validation fraction {validation_fraction} leaves one side of {n} records empty"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let pick = |idx: &[usize]| -> Vec<LogitRecord> {
        idx.iter().map(|&i| dataset.records[i].clone()).collect()
    };
    Ok(DatasetSplit {
        validation: dataset.subset(pick(&order[..n_val])),
        test: dataset.subset(pick(&order[n_val..])),
        seed,
    })
}

/// Consecutive chunks of `batch_size` items in order. With `drop_partial`,
/// a trailing chunk shorter than `batch_size` is discarded.
pub fn batch_slices<T>(
    items: &[T],
    batch_size: usize,
    drop_partial: bool,
) -> impl Iterator<Item = &[T]> {
    assert!(batch_size >= 1, "batch size must be positive");
    items
        .chunks(batch_size)
        .filter(move |c| !drop_partial || c.len() == batch_size)
}

/// Sample ids grouped into consecutive batches in dataset order. The final
/// batch may be smaller than `batch_size`.
pub fn batch_ids(dataset: &TraceDataset, batch_size: usize) -> Result<Vec<Vec<u64>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    Ok(batch_slices(dataset.records(), batch_size, false)
        .map(|chunk| chunk.iter().map(|r| r.sample_id).collect())
        .collect())
}
