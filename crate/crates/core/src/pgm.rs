//! Minimal binary PGM (P5) writers for debug dumps.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// 8-bit P5 image. Comment lines are emitted verbatim after `# `.
pub fn encode_pgm8(w: &mut impl Write, width: usize, height: usize, data: &[u8], comments: &[String]) -> Result<()> {
    assert_eq!(data.len(), width * height);
    writeln!(w, "P5")?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    write!(w, "{width} {height}\n255\n")?;
    w.write_all(data)?;
    Ok(())
}

/// 16-bit P5 image, samples big-endian as the format requires.
pub fn encode_pgm16(w: &mut impl Write, width: usize, height: usize, data: &[u16], comments: &[String]) -> Result<()> {
    assert_eq!(data.len(), width * height);
    writeln!(w, "P5")?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    write!(w, "{width} {height}\n65535\n")?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8], comments: &[String]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() + 64);
    encode_pgm8(&mut buf, width, height, data, comments)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, data: &[u16], comments: &[String]) -> Result<()> {
    let mut buf = Vec::with_capacity(2 * data.len() + 64);
    encode_pgm16(&mut buf, width, height, data, comments)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Linear rescale of `values` to 0..=255; non-finite samples map to 0.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() || max <= 0.0 {
                0
            } else {
                (v.abs() / max * 255.0).round() as u8
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        encode_pgm16(&mut buf, 2, 1, &[1, 258], &["z_cam=1.3".into()]).unwrap();
        let header = b"P5\n# z_cam=1.3\n2 1\n65535\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..], &[0, 1, 1, 2]);
    }
}
