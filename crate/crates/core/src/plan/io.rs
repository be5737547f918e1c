//! Readers and writers for the per-run files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::engine::{Phase, RoundRecord};
use crate::error::{Error, Result};
use crate::gp::EmbeddingMatrix;

pub const METRICS_HEADER: [&str; 8] =
    ["round", "phase", "strategy", "global_train_loss", "test_accuracy", "selected", "gp_trained", "elapsed_ms"];

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// One row per round. `elapsed_ms` is left empty unless `with_elapsed`, so
/// reruns of a plan produce identical files.
pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[RoundRecord], with_elapsed: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        let elapsed = match (with_elapsed, r.elapsed_ms) {
            (true, Some(ms)) => ms.to_string(),
            _ => String::new(),
        };
        w.write_record([
            r.round.to_string(),
            r.phase.name().to_string(),
            r.strategy.name().to_string(),
            r.global_train_loss.to_string(),
            r.test_accuracy.to_string(),
            join_ids(&r.selected),
            r.gp_trained.to_string(),
            elapsed,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), kind: crate::error::ParseErrorKind::Malformed(msg.into()) }
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(malformed(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let bad = |field: &str| malformed(path, format!("row {}: bad {field}", line + 1));
        let num = |i: usize, field: &str| row[i].parse::<f64>().map_err(|_| bad(field));
        let phase = match &row[1] {
            "warmup" => Phase::Warmup,
            "normal" => Phase::Normal,
            _ => return Err(bad("phase")),
        };
        let selected = if row[5].is_empty() {
            Vec::new()
        } else {
            row[5].split(';').map(|s| s.parse::<usize>().map_err(|_| bad("selected"))).collect::<Result<_>>()?
        };
        out.push(RoundRecord {
            round: row[0].parse().map_err(|_| bad("round"))?,
            phase,
            strategy: row[2].parse().map_err(|_| bad("strategy"))?,
            global_train_loss: num(3, "global_train_loss")?,
            test_accuracy: num(4, "test_accuracy")?,
            selected,
            gp_trained: row[6].parse().map_err(|_| bad("gp_trained"))?,
            elapsed_ms: if row[7].is_empty() { None } else { Some(num(7, "elapsed_ms")?) },
        });
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Columns: `client_id, x_1..x_d, n_1..n_d` where `n` is the unit-length copy.
pub fn write_embeddings_csv(path: impl AsRef<Path>, x: &EmbeddingMatrix) -> Result<()> {
    let d = x.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["client_id".to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=d).map(|i| format!("n_{i}")));
    w.write_record(&header)?;
    let norm = x.normalized();
    for k in 0..x.num_clients() {
        let mut row = vec![k.to_string()];
        row.extend(x.matrix().column(k).iter().map(f64::to_string));
        row.extend(norm.column(k).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 3 || (width - 1) % 2 != 0 {
        return Err(malformed(path, "embedding header must be client_id, x_1..x_d, n_1..n_d"));
    }
    let d = (width - 1) / 2;
    let mut cols: Vec<f64> = Vec::new();
    let mut n = 0;
    for (line, row) in r.records().enumerate() {
        let row = row?;
        if row[0].parse::<usize>().ok() != Some(line) {
            return Err(malformed(path, format!("row {}: client ids must be 0, 1, ...", line + 1)));
        }
        for v in row.iter().skip(1).take(d) {
            cols.push(v.parse().map_err(|_| malformed(path, format!("row {}: bad value", line + 1)))?);
        }
        n += 1;
    }
    EmbeddingMatrix::new(DMatrix::from_vec(d, n, cols))
}
