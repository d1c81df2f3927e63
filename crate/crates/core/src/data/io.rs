//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.

use std::path::Path;

use super::{io_err, DataError, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_netpbm(path: &Path, magic: &str, channels: usize, h: usize, w: usize, planar: &[f64]) -> Result<()> {
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    buf.reserve(channels * h * w);
    for i in 0..h * w {
        for c in 0..channels {
            buf.push(quantize(planar[c * h * w + i]));
        }
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

/// Writes a `[3,H,W]` image with values in `[0,1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    match *image.shape() {
        [3, h, w] => write_netpbm(path, "P6", 3, h, w, image.data()),
        _ => Err(format_err(path, format!("PPM needs [3,H,W], got {:?}", image.shape()))),
    }
}

/// Writes a `[1,H,W]` or `[H,W]` map with values in `[0,1]`.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    match *map.shape() {
        [1, h, w] | [h, w] => write_netpbm(path, "P5", 1, h, w, map.data()),
        _ => Err(format_err(path, format!("PGM needs [1,H,W], got {:?}", map.shape()))),
    }
}

/// Parses the header; returns (width, height, payload offset).
fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        let hint = match (magic, found.as_str()) {
            (b"P6", "P3") | (b"P5", "P2") => " (ASCII variant is not supported)",
            _ => "",
        };
        return Err(format_err(
            path,
            format!("expected {} header, found {found:?}{hint}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero image size"));
    }
    Ok((w, h, pos + 1))
}

fn read_netpbm(path: &Path, magic: &[u8; 2], channels: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (w, h, offset) = parse_header(path, &bytes, magic)?;
    let need = channels * h * w;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(format_err(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let mut planar = vec![0.0; need];
    for i in 0..h * w {
        for c in 0..channels {
            planar[c * h * w + i] = payload[i * channels + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], planar).map_err(|e| format_err(path, e.to_string()))
}

/// Reads a binary PPM as `[3,H,W]` in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    read_netpbm(path, b"P6", 3)
}

/// Reads a binary PGM as `[1,H,W]` in `[0,1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    read_netpbm(path, b"P5", 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn ppm_round_trip_within_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut rng = SplitMix64::new(1);
        let img = Tensor::new(&[3, 5, 7], (0..105).map(|_| rng.next_f64()).collect()).unwrap();
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(bytes.len(), 11 + 105);
    }

    #[test]
    fn extremes_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        let map = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        write_pgm(&p, &map).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), map);
    }

    #[test]
    fn rejects_ascii_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        let err = read_ppm(&p).unwrap_err().to_string();
        assert!(err.contains("ASCII"), "{err}");
        std::fs::write(&p, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("truncated"));
        std::fs::write(&p, b"P6\n2 x\n255\n").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("malformed"));
        std::fs::write(&p, b"P6\n# note\n1 1\n255\n\x00\xff\x10").unwrap();
        assert_eq!(read_ppm(&p).unwrap().data()[1], 1.0);
    }
}
