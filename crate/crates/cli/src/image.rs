//! Binary PGM contact sheet of channel 0 of each sample.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{ensure, Result};
use dig_core::Tensor;

/// Tiles samples in a near-square grid with a one-pixel gap, scaling the
/// shared min..max range to 0..255.
pub fn write_pgm_grid(path: &Path, samples: &[Tensor]) -> Result<()> {
    ensure!(!samples.is_empty(), "no samples to write");
    let shape = samples[0].shape();
    ensure!(shape.len() == 3, "expected [C, I, I] samples, got {shape:?}");
    let side = shape[1];
    let cols = (samples.len() as f64).sqrt().ceil() as usize;
    let rows = samples.len().div_ceil(cols);
    let (w, h) = (cols * (side + 1) - 1, rows * (side + 1) - 1);

    let plane = side * side;
    let (lo, hi) = samples
        .iter()
        .flat_map(|s| s.data()[..plane].iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut pixels = vec![0u8; w * h];
    for (n, s) in samples.iter().enumerate() {
        let (gy, gx) = (n / cols * (side + 1), n % cols * (side + 1));
        for y in 0..side {
            for x in 0..side {
                let v = (s.data()[y * side + x] - lo) / span;
                pixels[(gy + y) * w + gx + x] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}
