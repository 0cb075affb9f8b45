//! CSV and plain-text outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};

use dvp_core::Tensor;

/// Bumped whenever a CSV layout changes.
pub const FORMAT_VERSION: u32 = 1;

/// CSV writer whose first line is `# dvp <kind> v<version>`, followed by
/// `header`.
pub fn csv_writer(path: &Path, kind: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# dvp {kind} v{FORMAT_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_matrix_csv(path: &Path, kind: &str, m: &Tensor) -> Result<()> {
    let cols: Vec<String> = (0..m.cols()).map(|j| format!("k{j}")).collect();
    let mut header = vec!["query"];
    header.extend(cols.iter().map(String::as_str));
    let mut w = csv_writer(path, kind, &header)?;
    for i in 0..m.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const SHADES: &[u8] = b" .:-=+*#%@";

/// One character per cell, darker for larger weights (scaled to the
/// matrix maximum).
pub fn ascii_heatmap(m: &Tensor) -> String {
    let max = m.data().iter().copied().fold(0.0_f64, f64::max);
    let mut s = String::new();
    for i in 0..m.rows() {
        for &v in m.row(i) {
            let level = if max > 0.0 { (v / max * (SHADES.len() - 1) as f64).round() as usize } else { 0 };
            s.push(SHADES[level.min(SHADES.len() - 1)] as char);
        }
        s.push('\n');
    }
    s
}
