//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Parses a P5 or P6 file; returns `(width, height, channels, samples)`.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("expected P5 or P6")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height * channels {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((width, height, channels, data.to_vec()))
}

pub fn read(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    decode(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| i as u8 * 7).collect();
        let (w, h, c, back) = decode(&encode_ppm(4, 3, &rgb), Path::new("x")).unwrap();
        assert_eq!((w, h, c), (4, 3, 3));
        assert_eq!(back, rgb);
        let gray = vec![0, 5, 10, 255, 32, 64];
        let (w, h, c, back) = decode(&encode_pgm(3, 2, &gray), Path::new("x")).unwrap();
        assert_eq!((w, h, c), (3, 2, 1));
        assert_eq!(back, gray);
    }

    #[test]
    fn rejects_truncation() {
        let mut bytes = encode_pgm(3, 2, &[1, 2, 3, 4, 5, 6]);
        bytes.pop();
        assert!(matches!(decode(&bytes, Path::new("m.pgm")), Err(Error::Format { .. })));
        assert!(decode(b"P3\n1 1\n255\n", Path::new("m")).is_err());
    }
}
