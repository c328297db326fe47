use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use pat_core::Tensor;

/// Writes a `grid_h x grid_w` map in [0, 1] as an 8-bit binary PGM, each
/// cell expanded to a `scale x scale` block.
pub fn write_map(path: &Path, map: &Tensor<f64>, scale: usize) -> Result<()> {
    let (gh, gw) = (map.rows(), map.cols());
    let (h, w) = (gh * scale, gw * scale);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = map.at(y / scale, x / scale).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}
