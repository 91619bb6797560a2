//! Metrics streams and the curve export.

use std::io::{BufRead, Write};

use clap::ValueEnum;
use klue::provenance::{config_hash, FileHeader};
use klue::train::EpochRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CSV_COLUMNS: [&str; 3] = ["epoch", "variant", "auc"];

/// First line of a metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub header: FileHeader,
    pub variant: String,
    pub seed: u64,
}

/// One NDJSON line: an epoch record tagged with its variant.
pub fn record_line(variant: &str, rec: &EpochRecord) -> String {
    let mut v = serde_json::to_value(rec).expect("record serializes");
    if let Value::Object(map) = &mut v {
        map.insert("variant".into(), Value::String(variant.to_string()));
    }
    serde_json::to_string(&v).expect("record serializes")
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: {err}")]
    Io {
        source_name: String,
        err: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Series {
    /// AUC of the refined output.
    Refined,
    /// AUC of the class head before refinement.
    Initial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub variant: String,
    pub auc: f64,
}

/// Parsed stream: its header (if any) and the selected points.
#[derive(Debug)]
pub struct Stream {
    pub header: Option<StreamHeader>,
    pub points: Vec<CurvePoint>,
}

#[derive(Deserialize)]
struct TaggedRecord {
    #[serde(flatten)]
    record: EpochRecord,
    variant: Option<String>,
}

/// Reads one metrics stream, keeping records of `split`. Blank lines are
/// skipped; anything else that is not a header or epoch record fails with
/// its line number.
pub fn read_stream<R: BufRead>(source_name: &str, reader: R, split: &str, series: Series) -> Result<Stream, StreamError> {
    let mut header: Option<StreamHeader> = None;
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|err| StreamError::Io {
            source_name: source_name.to_string(),
            err,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| StreamError::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if v.get("header").is_some() {
            header = Some(serde_json::from_value(v).map_err(|e| parse_err(format!("bad stream header: {e}")))?);
            continue;
        }
        let tagged: TaggedRecord =
            serde_json::from_value(v).map_err(|e| parse_err(format!("bad epoch record: {e}")))?;
        if tagged.record.split != split {
            continue;
        }
        let variant = tagged
            .variant
            .or_else(|| header.as_ref().map(|h| h.variant.clone()))
            .ok_or_else(|| parse_err("record has no variant and no stream header precedes it".into()))?;
        let auc = match series {
            Series::Refined => tagged.record.auc_refined,
            Series::Initial => tagged.record.auc_initial,
        };
        points.push(CurvePoint {
            epoch: tagged.record.epoch,
            variant,
            auc,
        });
    }
    Ok(Stream { header, points })
}

/// Writes the plot-ready CSV: a provenance comment line, the column
/// header, then one row per point.
pub fn write_csv<W: Write>(mut out: W, header: &FileHeader, points: &[CurvePoint]) -> anyhow::Result<()> {
    writeln!(out, "{}", header.comment_line())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for p in points {
        w.write_record([p.epoch.to_string(), p.variant.clone(), format!("{}", p.auc)])?;
    }
    w.flush()?;
    Ok(())
}

/// Header for a curve file, hashed over the inputs' headers and the
/// selection.
pub fn export_header(inputs: &[Option<StreamHeader>], split: &str, series: Series) -> FileHeader {
    let hashes: Vec<Option<&str>> = inputs
        .iter()
        .map(|h| h.as_ref().map(|h| h.header.config_hash.as_str()))
        .collect();
    FileHeader::new(config_hash(&(hashes, split, format!("{series:?}"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use klue::model::LossTerms;

    fn rec(epoch: usize, split: &str, auc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            split: split.into(),
            map_initial: 0.5,
            map_refined: 0.5,
            auc_initial: auc - 0.1,
            auc_refined: auc,
            loss: LossTerms::default(),
        }
    }

    #[test]
    fn round_trip_through_stream() {
        let h = StreamHeader {
            header: FileHeader::new("abc".into()),
            variant: "v1".into(),
            seed: 0,
        };
        let mut text = serde_json::to_string(&h).unwrap() + "\n";
        for e in 0..3 {
            text += &record_line("v1", &rec(e, "train", 0.9));
            text += "\n";
            text += &record_line("v1", &rec(e, "val", 0.7 + e as f64 / 100.0));
            text += "\n";
        }
        let s = read_stream("m", text.as_bytes(), "val", Series::Refined).unwrap();
        assert_eq!(s.header, Some(h));
        let aucs: Vec<f64> = s.points.iter().map(|p| p.auc).collect();
        assert_eq!(aucs, vec![0.7, 0.71, 0.72]);
        let s = read_stream("m", text.as_bytes(), "val", Series::Initial).unwrap();
        assert!((s.points[0].auc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = format!("{}\n\n{{not json\n", record_line("baseline", &rec(0, "val", 0.5)));
        let err = read_stream("metrics.ndjson", text.as_bytes(), "val", Series::Refined).unwrap_err();
        assert!(err.to_string().starts_with("metrics.ndjson:3:"), "{err}");
        let err = read_stream("m", "{\"epoch\": 1}\n".as_bytes(), "val", Series::Refined).unwrap_err();
        assert!(err.to_string().starts_with("m:1: bad epoch record"), "{err}");
    }

    #[test]
    fn empty_input_gives_header_only() {
        let s = read_stream("m", "".as_bytes(), "val", Series::Refined).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &export_header(&[s.header], "val", Series::Refined), &s.points).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("# klue "));
        assert_eq!(lines[1], "epoch,variant,auc");
    }
}
