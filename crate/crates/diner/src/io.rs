//! Image and table output: binary PPM/PGM and CSV.

use std::io::Write;
use std::path::Path;

use crate::grid::Grid;

/// Writes a [0,1] RGB grid as binary PPM (P6, maxval 255), quantized
/// round-half-up.
pub fn save_ppm(path: &Path, image: &Grid) -> std::io::Result<()> {
    assert_eq!(image.channels(), 3);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let mut buf = Vec::with_capacity(image.data().len());
    for v in image.data() {
        buf.push(quantize8(*v));
    }
    f.write_all(&buf)
}

#[inline]
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a scalar grid as 16-bit binary PGM (P5, maxval 65535, big-endian
/// samples per the netpbm spec) with linear scaling; NaN entries map to the
/// sentinel 65535. The scaling is documented in a `<path>.txt` sidecar.
pub fn save_pgm16(path: &Path, map: &Grid) -> std::io::Result<()> {
    assert_eq!(map.channels(), 1);
    let finite: Vec<f64> = map.data().iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if finite.is_empty() || lo >= hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n65535\n", map.width(), map.height())?;
    let mut buf = Vec::with_capacity(map.data().len() * 2);
    for &v in map.data() {
        let q: u16 = if v.is_finite() {
            (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 65534.0 + 0.5) as u16
        } else {
            65535
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    f.write_all(&buf)?;
    drop(f);

    let sidecar = path.with_extension(format!(
        "{}.txt",
        path.extension().and_then(|e| e.to_str()).unwrap_or("pgm")
    ));
    let mut s = std::fs::File::create(sidecar)?;
    writeln!(s, "min = {lo}")?;
    writeln!(s, "max = {hi}")?;
    writeln!(s, "value = min + (max - min) * sample / 65534")?;
    writeln!(s, "sample 65535 marks undefined pixels")?;
    Ok(())
}

/// Writes CSV rows with a header. Values use Rust's shortest round-trip
/// float formatting, so identical runs produce identical bytes.
pub fn save_csv(path: &Path, header: &str, rows: &[String]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}
