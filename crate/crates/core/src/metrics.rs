//! CSV metrics stream and curve export.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::controller::Stage;
use crate::error::{Error, Result};

pub const HEADER: [&str; 9] = [
    "step",
    "stage",
    "wall_time_s",
    "samples_consumed",
    "train_loss",
    "eval_loss",
    "lr",
    "bytes_moved",
    "event",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: Stage,
    pub wall_time_s: f64,
    pub samples_consumed: u64,
    pub train_loss: f32,
    pub eval_loss: Option<f32>,
    pub lr: f32,
    pub bytes_moved: u64,
    pub event: Option<String>,
}

impl MetricsRecord {
    fn fields(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.stage.to_string(),
            self.wall_time_s.to_string(),
            self.samples_consumed.to_string(),
            self.train_loss.to_string(),
            self.eval_loss.map(|v| v.to_string()).unwrap_or_default(),
            self.lr.to_string(),
            self.bytes_moved.to_string(),
            self.event.clone().unwrap_or_default(),
        ]
    }
}

pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    /// Creates (or truncates) `path` and writes the header. With `append`
    /// an existing file is extended instead.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter::new(file);
        if !exists {
            w.write_header()?;
        }
        Ok(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("metrics write failed: {e}"))
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(w),
        }
    }

    pub fn write_header(&mut self) -> Result<()> {
        self.inner.write_record(HEADER).map_err(csv_err)
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        self.inner.write_record(r.fields()).map_err(csv_err)?;
        self.inner.flush().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Data(format!("metrics flush failed: {e}")))
    }
}

fn parse_field<T: std::str::FromStr>(v: &str, name: &str, line: u64) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line: line as usize,
        msg: format!("bad {name} value {v:?}"),
    })
}

/// Parses a metrics stream; errors carry the 1-based line number.
pub fn read_metrics<R: std::io::Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut out = Vec::new();
    let mut seen_header = false;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !seen_header {
            if rec.iter().ne(HEADER.iter().copied()) {
                return Err(Error::Parse {
                    line: line as usize,
                    msg: "missing or unexpected header".into(),
                });
            }
            seen_header = true;
            continue;
        }
        if rec.len() != HEADER.len() {
            return Err(Error::Parse {
                line: line as usize,
                msg: format!("expected {} fields, found {}", HEADER.len(), rec.len()),
            });
        }
        let stage = rec[1].parse::<Stage>().map_err(|_| Error::Parse {
            line: line as usize,
            msg: format!("bad stage {:?}", &rec[1]),
        })?;
        out.push(MetricsRecord {
            step: parse_field(&rec[0], "step", line)?,
            stage,
            wall_time_s: parse_field(&rec[2], "wall_time_s", line)?,
            samples_consumed: parse_field(&rec[3], "samples_consumed", line)?,
            train_loss: parse_field(&rec[4], "train_loss", line)?,
            eval_loss: if rec[5].is_empty() {
                None
            } else {
                Some(parse_field(&rec[5], "eval_loss", line)?)
            },
            lr: parse_field(&rec[6], "lr", line)?,
            bytes_moved: parse_field(&rec[7], "bytes_moved", line)?,
            event: (!rec[8].is_empty()).then(|| rec[8].to_string()),
        });
    }
    if !seen_header {
        return Err(Error::Parse {
            line: 1,
            msg: "empty metrics file".into(),
        });
    }
    Ok(out)
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics(f)
}

/// Long-format plotting table: one row per record per axis, tagged with
/// the run label, so several runs overlay on shared axes.
pub fn export_curves<W: Write>(runs: &[(String, Vec<MetricsRecord>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "axis", "x", "train_loss", "eval_loss", "stage"])
        .map_err(csv_err)?;
    for axis in ["time", "samples"] {
        for (name, records) in runs {
            for r in records {
                let x = match axis {
                    "time" => r.wall_time_s.to_string(),
                    _ => r.samples_consumed.to_string(),
                };
                w.write_record([
                    name.as_str(),
                    axis,
                    &x,
                    &r.train_loss.to_string(),
                    &r.eval_loss.map(|v| v.to_string()).unwrap_or_default(),
                    &r.stage.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

/// Mean of the last `k` evaluation losses.
pub fn smoothed_eval_loss(records: &[MetricsRecord], k: usize) -> Option<f32> {
    let evals: Vec<f32> = records.iter().filter_map(|r| r.eval_loss).collect();
    if evals.is_empty() || k == 0 {
        return None;
    }
    let tail = &evals[evals.len().saturating_sub(k)..];
    Some(tail.iter().sum::<f32>() / tail.len() as f32)
}
