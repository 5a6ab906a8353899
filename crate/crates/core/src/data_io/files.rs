//! CSV files: series `timestamp,<sensor…>[,label]` and scores
//! `timestamp,score,gt_label,pred_label`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::RawSeries;

fn parse_value(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("row {row}, column {column}: cannot parse {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("row {row}, column {column}: non-finite value {field:?}")));
    }
    Ok(v)
}

fn parse_label(field: &str, row: usize, column: &str) -> Result<u8> {
    match parse_value(field, row, column)? {
        v if v == 0.0 => Ok(0),
        v if v == 1.0 => Ok(1),
        _ => Err(Error::Data(format!("row {row}, column {column}: label {field:?} is not 0 or 1"))),
    }
}

/// Reads a series from any CSV source. A final column named `label` holds
/// binary ground truth; every other column after `timestamp` is a sensor.
pub fn parse_series<R: Read>(source: R) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(|h| h.to_ascii_lowercase()) != Some("timestamp".into()) {
        return Err(Error::Data(format!("first column must be 'timestamp', header is {header:?}")));
    }
    let has_label = header.len() > 1 && header.last().unwrap().eq_ignore_ascii_case("label");
    let names: Vec<String> = header[1..header.len() - usize::from(has_label)].to_vec();
    if names.is_empty() {
        return Err(Error::Data("no sensor columns".into()));
    }
    let mut timestamps = Vec::new();
    let mut values = vec![Vec::new(); names.len()];
    let mut labels = has_label.then(Vec::new);
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = k + 2;
        if record.len() != header.len() {
            return Err(Error::Data(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        timestamps.push(record[0].to_owned());
        for (i, name) in names.iter().enumerate() {
            values[i].push(parse_value(&record[i + 1], row, name)?);
        }
        if let Some(l) = labels.as_mut() {
            l.push(parse_label(&record[header.len() - 1], row, "label")?);
        }
    }
    RawSeries::new(names, timestamps, values, labels)
}

pub fn read_series(path: &Path) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_series(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn write_csv<W: Write>(
    mut writer: W,
    note: Option<&str>,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    if let Some(note) = note {
        for line in note.lines() {
            writeln!(writer, "# {line}").map_err(|e| Error::Data(format!("writing CSV: {e}")))?;
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Data(format!("flushing CSV: {e}")))
}

/// Floats are written in shortest round-trip form, so reading back is exact.
/// Each line of `note` becomes a leading `#` comment.
pub fn write_series(path: &Path, x: &RawSeries, note: Option<&str>) -> Result<()> {
    x.validate()?;
    let mut header = vec!["timestamp".to_owned()];
    header.extend(x.names.iter().cloned());
    if x.labels.is_some() {
        header.push("label".into());
    }
    let rows = (0..x.len()).map(|t| {
        let mut row = vec![x.timestamps[t].clone()];
        row.extend(x.values.iter().map(|v| v[t].to_string()));
        if let Some(l) = &x.labels {
            row.push(l[t].to_string());
        }
        row
    });
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), note, &header, rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub timestamp: String,
    pub score: f64,
    pub gt_label: Option<u8>,
    pub pred_label: u8,
}

pub const SCORE_HEADER: [&str; 4] = ["timestamp", "score", "gt_label", "pred_label"];

/// An unknown ground-truth label is written as an empty field.
pub fn write_scores(path: &Path, rows: &[ScoreRow], note: Option<&str>) -> Result<()> {
    let header: Vec<String> = SCORE_HEADER.iter().map(|s| s.to_string()).collect();
    let body = rows.iter().map(|r| {
        vec![
            r.timestamp.clone(),
            r.score.to_string(),
            r.gt_label.map_or(String::new(), |l| l.to_string()),
            r.pred_label.to_string(),
        ]
    });
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), note, &header, body)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != SCORE_HEADER {
        return Err(Error::Data(format!(
            "{}: score header {header:?}, expected {SCORE_HEADER:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = k + 2;
        let score = parse_value(&record[1], row, "score")?;
        if score < 0.0 {
            return Err(Error::Data(format!("row {row}: negative score {score}")));
        }
        out.push(ScoreRow {
            timestamp: record[0].to_owned(),
            score,
            gt_label: match &record[2] {
                "" => None,
                f => Some(parse_label(f, row, "gt_label")?),
            },
            pred_label: parse_label(&record[3], row, "pred_label")?,
        });
    }
    Ok(out)
}
