//! Per-snapshot word embeddings averaged from per-occurrence contextual vectors.
//!
//! The neural encoder lives outside this crate. It writes one record per
//! sampled occurrence (subtoken vectors already averaged to a word vector) in
//! the exchange format below, and this module folds those records into one
//! mean vector per word.
//!
//! Exchange format, UTF-8 text:
//!
//! ```text
//! EMB<TAB>snapshot_label<TAB>dimension<TAB>record_count
//! token<TAB>f1<TAB>...<TAB>fd
//! ```
//!
//! Floats are written with 9 significant digits, which round-trips `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ContextualRecord {
    pub token: String,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    mean: Vec<f32>,
    count: usize,
}

/// Averaged vectors for one snapshot. Tokens absent from the table read back
/// as the zero vector with count 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    label: String,
    dim: usize,
    entries: BTreeMap<String, Entry>,
    zero: Vec<f32>,
}

impl EmbeddingTable {
    pub fn empty(label: impl Into<String>, dim: usize) -> Self {
        EmbeddingTable {
            label: label.into(),
            dim,
            entries: BTreeMap::new(),
            zero: vec![0.0; dim],
        }
    }

    /// Build a table directly from already-averaged vectors, one per token.
    pub fn from_vectors<I, S>(label: impl Into<String>, dim: usize, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        average(
            label,
            dim,
            vectors.into_iter().map(|(t, v)| ContextualRecord {
                token: t.into(),
                vector: v,
            }),
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vector(&self, token: &str) -> &[f32] {
        self.entries.get(token).map_or(&self.zero, |e| &e.mean)
    }

    /// Number of occurrences averaged into `token`'s vector.
    pub fn count(&self, token: &str) -> usize {
        self.entries.get(token).map_or(0, |e| e.count)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.keys().map(String::as_str)
    }
}

/// Compensated running sum (Neumaier's variant of Kahan summation).
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Average per-occurrence records into one vector per token.
///
/// Every record must have dimension `dim` and finite components.
pub fn average<I>(label: impl Into<String>, dim: usize, records: I) -> Result<EmbeddingTable>
where
    I: IntoIterator<Item = ContextualRecord>,
{
    let mut sums: BTreeMap<String, (Vec<CompensatedSum>, usize)> = BTreeMap::new();
    for record in records {
        if record.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: record.vector.len(),
            });
        }
        if record.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite component in vector for {:?}",
                record.token
            )));
        }
        let (acc, n) = sums
            .entry(record.token)
            .or_insert_with(|| (vec![CompensatedSum::default(); dim], 0));
        for (a, &x) in acc.iter_mut().zip(&record.vector) {
            a.add(f64::from(x));
        }
        *n += 1;
    }

    let mut table = EmbeddingTable::empty(label, dim);
    table.entries = sums
        .into_iter()
        .map(|(token, (acc, n))| {
            let mean = acc.iter().map(|s| (s.value() / n as f64) as f32).collect();
            (token, Entry { mean, count: n })
        })
        .collect();
    Ok(table)
}

/// Cosine similarity, 0 when either vector has zero norm.
pub fn cosine(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let (mut dot, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (xx.sqrt() * yy.sqrt())).clamp(-1.0, 1.0))
}

/// `x` with 9 significant digits, in the style of C's `%.9g`.
pub(crate) fn format_sig9(x: f32) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.8e}", x);
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if !(-5..9).contains(&exp) {
        let (mantissa, _) = sci.split_once('e').unwrap();
        let mantissa = trim_fraction(mantissa);
        return format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_fraction(&format!("{:.*}", decimals, x)).to_owned()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Header fields and the raw records of an exchange file.
pub struct RecordFile {
    pub label: String,
    pub dim: usize,
    pub records: Vec<ContextualRecord>,
}

pub fn read_records(path: &Path) -> Result<RecordFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 4 || fields[0] != "EMB" {
        return Err(Error::parse(
            path,
            1,
            "malformed header, expected EMB<TAB>label<TAB>dimension<TAB>record_count",
        ));
    }
    let label = fields[1].to_owned();
    let dim: usize = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad dimension {:?}", fields[2])))?;
    let expected: usize = fields[3]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad record count {:?}", fields[3])))?;

    let mut records = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let token = cols.next().unwrap_or_default().to_owned();
        let vector = cols
            .map(|c| {
                c.parse::<f32>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(path, lineno, format!("non-finite or invalid value {c:?}")))
            })
            .collect::<Result<Vec<f32>>>()?;
        if vector.len() != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {dim} values, found {}", vector.len()),
            ));
        }
        records.push(ContextualRecord { token, vector });
    }
    if records.len() != expected {
        return Err(Error::parse(
            path,
            1,
            format!("header declares {expected} records, file has {}", records.len()),
        ));
    }
    Ok(RecordFile {
        label,
        dim,
        records,
    })
}

/// Load an exchange file and average its records. Files written by
/// [`save_table`] have one record per token and load back unchanged, except
/// that occurrence counts are not part of the format and read back as the
/// number of rows per token.
pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let file = read_records(path)?;
    average(file.label, file.dim, file.records)
}

pub fn save_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(out, "EMB\t{}\t{}\t{}", table.label, table.dim, table.len()).map_err(io)?;
    for (token, entry) in &table.entries {
        write!(out, "{token}").map_err(io)?;
        for &x in &entry.mean {
            write!(out, "\t{}", format_sig9(x)).map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}
