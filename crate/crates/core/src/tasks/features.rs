//! Precomputed visual features on disk.
//!
//! ```text
//! "DVPF" | version u32 | count u32 | N u32 | d_v u32 | count * N * d_v f32 (little-endian)
//! ```
//!
//! Tokens and labels live in a sibling CSV with the same stem:
//! `example_id,label,token_0,...,token_{L-1}` after a version comment line.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::Example;
use crate::binio::{put_u32, Cursor};
use crate::error::{invalid, DvpError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DVPF";
pub const VERSION: u32 = 1;
pub const CSV_VERSION: &str = "# dvp examples v1";

/// Path of the token/label table that accompanies a feature file.
pub fn sibling_csv(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

pub fn encode_features(features: &[&Tensor]) -> Result<Vec<u8>> {
    let first = features.first().ok_or_else(|| invalid("no feature matrices to write"))?;
    let (n, dv) = (first.rows(), first.cols());
    let mut out = Vec::with_capacity(20 + features.len() * n * dv * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, features.len())?;
    put_u32(&mut out, n)?;
    put_u32(&mut out, dv)?;
    for f in features {
        if f.shape() != [n, dv] {
            return Err(DvpError::ShapeMismatch { op: "encode_features", left: vec![n, dv], right: f.shape().to_vec() });
        }
        for &v in f.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut c = Cursor::new(bytes, "feature file");
    if c.take(4.min(bytes.len()))? != MAGIC {
        return Err(Cursor::new(bytes, "feature file").error("bad magic, expected DVPF"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.error(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let n = c.u32()? as usize;
    let dv = c.u32()? as usize;
    if n == 0 || dv == 0 {
        return Err(c.error(format!("empty feature shape {n}x{dv}")));
    }
    let expected = count as u64 * n as u64 * dv as u64 * 4;
    if expected != c.remaining() as u64 {
        return Err(c.error(format!(
            "header declares {count}x{n}x{dv} features ({expected} bytes), {} bytes follow",
            c.remaining()
        )));
    }
    (0..count)
        .map(|_| {
            let data = c.f32s(n * dv)?.into_iter().map(f64::from).collect();
            Tensor::new(vec![n, dv], data)
        })
        .collect()
}

pub fn load_features(path: &Path) -> Result<Vec<Tensor>> {
    decode_features(&std::fs::read(path)?)
}

/// Writes features plus the sibling token/label CSV.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let feats: Vec<&Tensor> = examples.iter().map(|e| &e.features).collect();
    std::fs::write(path, encode_features(&feats)?)?;
    let mut file = std::fs::File::create(sibling_csv(path))?;
    writeln!(file, "{CSV_VERSION}")?;
    let text_len = examples.first().map_or(0, |e| e.tokens.len());
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["example_id".to_string(), "label".to_string()];
    header.extend((0..text_len).map(|i| format!("token_{i}")));
    w.write_record(&header)?;
    for (i, e) in examples.iter().enumerate() {
        if e.tokens.len() != text_len {
            return Err(invalid(format!("example {i} has {} tokens, expected {text_len}", e.tokens.len())));
        }
        let mut rec = vec![i.to_string(), e.label.to_string()];
        rec.extend(e.tokens.iter().map(ToString::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file and its sibling CSV.
pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    let features = load_features(path)?;
    let csv_path = sibling_csv(path);
    let mut reader = BufReader::new(std::fs::File::open(&csv_path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != CSV_VERSION {
        return Err(invalid(format!("{}: expected leading line {CSV_VERSION:?}", csv_path.display())));
    }
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::with_capacity(features.len());
    let mut feats = features.into_iter();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<usize> {
            rec.get(j)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid(format!("{}: row {i} column {j} is not an integer", csv_path.display())))
        };
        if parse(0)? != i {
            return Err(invalid(format!("{}: row {i} has example_id {}", csv_path.display(), parse(0)?)));
        }
        let label = parse(1)?;
        let tokens = (2..rec.len()).map(parse).collect::<Result<Vec<_>>>()?;
        let features = feats
            .next()
            .ok_or_else(|| invalid(format!("{} has more rows than the feature file", csv_path.display())))?;
        out.push(Example { tokens, features, label });
    }
    if feats.next().is_some() {
        return Err(invalid(format!("{} has fewer rows than the feature file", csv_path.display())));
    }
    Ok(out)
}
