//! CSV writers and the analytic FLOP table.

use std::io::Write;

use dig_core::{flops_estimate, DigError, FlopReport, ModelConfig, Result};

use crate::scaling::ScalingRow;
use crate::strategies::StrategyRow;

fn csv_err(e: csv::Error) -> DigError {
    DigError::Format(e.to_string())
}

fn write_rows<W: Write, T: serde::Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `method,T,D,M,median_ms,p10_ms,p90_ms,est_peak_bytes`.
pub fn write_scaling_csv<W: Write>(w: W, rows: &[ScalingRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn write_strategy_csv<W: Write>(w: W, rows: &[StrategyRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn flops_table(presets: &[&str]) -> Result<Vec<FlopReport>> {
    presets
        .iter()
        .map(|name| flops_estimate(&ModelConfig::preset(name)?))
        .collect()
}

pub fn write_flops_csv<W: Write>(w: W, rows: &[FlopReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["name", "gflops", "reference_gflops", "ratio"]).map_err(csv_err)?;
    for r in rows {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        out.write_record([r.name.clone(), format!("{:.6}", r.gflops), opt(r.reference_gflops), opt(r.ratio)])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::Method;

    #[test]
    fn scaling_header_matches_contract() {
        let row = ScalingRow {
            method: Method::GlaChunked,
            t: 256,
            d: 64,
            m: Some(64),
            median_ms: 1.5,
            p10_ms: 1.0,
            p90_ms: 2.0,
            est_peak_bytes: 99,
        };
        let soft = ScalingRow {
            method: Method::Softmax,
            m: None,
            ..row.clone()
        };
        let mut buf = Vec::new();
        write_scaling_csv(&mut buf, &[row, soft]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,T,D,M,median_ms,p10_ms,p90_ms,est_peak_bytes");
        assert_eq!(lines[1], "gla_chunked,256,64,64,1.5,1.0,2.0,99");
        assert_eq!(lines[2], "softmax,256,64,,1.5,1.0,2.0,99");
    }

    #[test]
    fn flops_table_rows() {
        let rows = flops_table(&["dig-s", "toy-s"]).unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        write_flops_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,gflops,reference_gflops,ratio\ndig-s,4.29"), "{text}");
        assert!(flops_table(&["nope"]).is_err());
    }
}
