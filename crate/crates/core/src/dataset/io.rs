//! CSV and JSONL interchange formats.
//!
//! CSV header: `id,f0,...,f{p-1},confidence,predicted_class[,true_label][,display_uri]`.
//! JSONL: one [`PointRecord`] object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{PointRecord, TestPoint, TestSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

pub fn load_testset(path: &Path, format: Format) -> Result<TestSet> {
    let file = File::open(path)?;
    match format {
        Format::Csv => read_csv(BufReader::new(file)),
        Format::Jsonl => read_jsonl(BufReader::new(file)),
    }
}

pub fn write_testset(ts: &TestSet, path: &Path, format: Format) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => write_csv(ts, &mut out)?,
        Format::Jsonl => write_jsonl(ts, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

struct Columns {
    id: usize,
    features: Vec<usize>,
    confidence: usize,
    predicted_class: usize,
    true_label: Option<usize>,
    display_uri: Option<usize>,
    width: usize,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let require = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.into()));

        let feature_count = headers
            .iter()
            .filter(|h| {
                let h = h.trim();
                h.len() > 1 && h.starts_with('f') && h[1..].chars().all(|c| c.is_ascii_digit())
            })
            .count();
        let features = (0..feature_count)
            .map(|j| require(&format!("f{j}")))
            .collect::<Result<Vec<_>>>()?;

        Ok(Columns {
            id: require("id")?,
            features,
            confidence: require("confidence")?,
            predicted_class: require("predicted_class")?,
            true_label: find("true_label"),
            display_uri: find("display_uri"),
            width: headers.len(),
        })
    }
}

pub(crate) fn read_csv<R: std::io::Read>(reader: R) -> Result<TestSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let cols = Columns::resolve(rdr.headers()?)?;

    let mut points = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let id = record.get(cols.id).unwrap_or_default().to_string();
        if record.len() != cols.width {
            return Err(Error::Dimension(format!(
                "row `{id}` (data line {}) has {} fields, header has {}",
                line + 1,
                record.len(),
                cols.width
            )));
        }
        let parse = |col: usize, what: &str| -> Result<f64> {
            let raw = record[col].trim();
            raw.parse::<f64>().map_err(|_| Error::Validation {
                row: id.clone(),
                message: format!("cannot parse {what} `{raw}` as a number"),
            })
        };
        let features = cols
            .features
            .iter()
            .enumerate()
            .map(|(j, &c)| parse(c, &format!("f{j}")))
            .collect::<Result<Vec<_>>>()?;
        let confidence = parse(cols.confidence, "confidence")?;
        let optional = |col: Option<usize>| {
            col.map(|c| record[c].to_string())
                .filter(|s| !s.is_empty())
        };
        points.push(TestPoint {
            id: id.clone(),
            features,
            confidence,
            predicted_class: record[cols.predicted_class].to_string(),
            true_label: optional(cols.true_label),
            display_uri: optional(cols.display_uri),
        });
    }
    TestSet::new(points)
}

pub(crate) fn read_jsonl<R: BufRead>(reader: R) -> Result<TestSet> {
    let mut points = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PointRecord = serde_json::from_str(&line)?;
        points.push(TestPoint::from(record));
    }
    TestSet::new(points)
}

pub(crate) fn write_csv<W: Write>(ts: &TestSet, out: W) -> Result<()> {
    let has_labels = ts.points().iter().any(|p| p.true_label.is_some());
    let has_uri = ts.points().iter().any(|p| p.display_uri.is_some());

    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((0..ts.dim()).map(|j| format!("f{j}")));
    header.push("confidence".into());
    header.push("predicted_class".into());
    if has_labels {
        header.push("true_label".into());
    }
    if has_uri {
        header.push("display_uri".into());
    }
    wtr.write_record(&header)?;

    for p in ts.points() {
        let mut row = vec![p.id.clone()];
        row.extend(p.features.iter().map(|v| v.to_string()));
        row.push(p.confidence.to_string());
        row.push(p.predicted_class.clone());
        if has_labels {
            row.push(p.true_label.clone().unwrap_or_default());
        }
        if has_uri {
            row.push(p.display_uri.clone().unwrap_or_default());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn write_jsonl<W: Write>(ts: &TestSet, mut out: W) -> Result<()> {
    for p in ts.points() {
        serde_json::to_writer(&mut out, &PointRecord::from(p))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
