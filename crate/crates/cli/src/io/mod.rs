//! File formats: OBJ/MTL, PNG, PFM, embedding blobs and loss-trace CSV.
//! Checkpoints use [`texmesh::blob`] directly.

pub mod image;
pub mod obj;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use texmesh::blob::Blob;
use texmesh::{Error, Result};

pub use image::{read_pfm, read_png, write_pfm, write_png};
pub use obj::{read_obj, write_obj};

pub fn write_blob(path: &Path, b: &Blob) -> Result<()> {
    std::fs::write(path, b.to_bytes()?)?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    Blob::from_bytes(&std::fs::read(path)?)
}

/// Embedding matrix (`M` rows of dimension `d`) as a blob of kind
/// `embeddings` with `{"m", "d"}` in the header and one `[M, d]` tensor.
pub fn embeddings_blob(x: &DMatrix<f64>) -> Result<Blob> {
    let (m, d) = x.shape();
    let mut b = Blob::new("embeddings", serde_json::json!({ "m": m, "d": d }));
    let rows: Vec<f64> = x.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    b.push("embeddings", &[m, d], &rows)?;
    Ok(b)
}

pub fn embeddings_from_blob(b: &Blob) -> Result<DMatrix<f64>> {
    if b.header.kind != "embeddings" {
        return Err(Error::invalid(format!("blob kind {} is not embeddings", b.header.kind)));
    }
    let get = |k: &str| {
        b.header
            .meta
            .get(k)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::invalid(format!("embeddings header lacks {k}")))
    };
    let (m, d) = (get("m")?, get("d")?);
    let (shape, data) = b.tensor("embeddings")?;
    if shape != [m, d] {
        return Err(Error::invalid(format!("embeddings tensor has shape {shape:?}, header says [{m}, {d}]")));
    }
    Ok(DMatrix::from_row_slice(m, d, data))
}

pub fn write_embeddings(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    write_blob(path, &embeddings_blob(x)?)
}

pub fn read_embeddings(path: &Path) -> Result<DMatrix<f64>> {
    embeddings_from_blob(&read_blob(path)?)
}

/// One loss value at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

/// `step,term,value` CSV. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,term,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.term, r.value);
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.split_inclusive('\n');
    let mut offset = 0;
    match lines.next() {
        Some(h) if h.trim_end() == "step,term,value" => offset += h.len(),
        _ => return Err(Error::parse(0, "missing step,term,value header")),
    }
    let mut rows = Vec::new();
    for line in lines {
        let start = offset;
        offset += line.len();
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::parse(start, format!("bad trace row {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(TraceRow {
            step: f[0].parse().map_err(|_| bad())?,
            term: f[1].to_string(),
            value: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip() {
        let x = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 0.1) * (j as f64 - 1.3));
        let back = embeddings_from_blob(&Blob::from_bytes(&embeddings_blob(&x).unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, x);
        let mut b = embeddings_blob(&x).unwrap();
        b.header.meta = serde_json::json!({"m": 3, "d": 5});
        assert!(embeddings_from_blob(&b).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let rows = vec![
            TraceRow { step: 0, term: "mask".into(), value: 0.1 + 0.2 },
            TraceRow { step: 0, term: "total".into(), value: -1e-300 },
            TraceRow { step: 7, term: "reg".into(), value: f64::NAN },
        ];
        let back = parse_trace_csv(&trace_csv(&rows)).unwrap();
        assert_eq!(back[..2], rows[..2]);
        assert!(back[2].value.is_nan());
        assert!(matches!(parse_trace_csv("step,term,value\n1,x\n"), Err(Error::Parse { offset: 16, .. })));
    }
}
