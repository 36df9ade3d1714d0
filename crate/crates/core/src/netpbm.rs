//! Binary Netpbm readers and writers: P6 (8-bit RGB), P5 (8-bit gray),
//! and P5 with maxval 65535 (16-bit big-endian gray, used for depth).
//!
//! Writers emit `MAGIC\n<w> <h>\n<maxval>\n` followed by the raw payload:
//! exactly one whitespace byte after the maxval. Readers accept arbitrary
//! whitespace and `#` comments between header tokens.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PnmImage {
    /// P6, maxval <= 255; data is RGB interleaved, `maxval` kept for scaling.
    Rgb8 {
        w: usize,
        h: usize,
        maxval: u16,
        data: Vec<u8>,
    },
    /// P5, maxval <= 255.
    Gray8 {
        w: usize,
        h: usize,
        maxval: u16,
        data: Vec<u8>,
    },
    /// P5, maxval > 255; 16-bit big-endian samples.
    Gray16 {
        w: usize,
        h: usize,
        maxval: u16,
        data: Vec<u16>,
    },
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::parse(format!(
                "{}: expected a numeric header field at byte {}",
                self.file, self.pos
            )));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(format!("{}: bad numeric header field", self.file)))
    }
}

/// Parse any supported binary PNM file.
pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let file = path.display().to_string();
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("{file}: {e}")))?;
    if bytes.len() < 2 {
        return Err(Error::parse(format!("{file}: truncated magic")));
    }
    let magic = &bytes[..2];
    if magic != b"P5" && magic != b"P6" {
        return Err(Error::parse(format!(
            "{file}: unsupported magic {:?} (want P5 or P6)",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut p = HeaderParser {
        bytes: &bytes,
        pos: 2,
        file: &file,
    };
    let w = p.token()?;
    let h = p.token()?;
    let maxval = p.token()?;
    if w == 0 || h == 0 {
        return Err(Error::parse(format!("{file}: zero image dimension")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(format!("{file}: maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(Error::parse(format!(
            "{file}: missing whitespace before payload"
        )));
    }
    let payload = &bytes[p.pos + 1..];
    let maxval16 = maxval as u16;
    match (magic, maxval > 255) {
        (b"P6", false) => {
            let need = w * h * 3;
            if payload.len() != need {
                return Err(Error::parse(format!(
                    "{file}: payload {} bytes, expected {need}",
                    payload.len()
                )));
            }
            Ok(PnmImage::Rgb8 {
                w,
                h,
                maxval: maxval16,
                data: payload.to_vec(),
            })
        }
        (b"P6", true) => Err(Error::parse(format!(
            "{file}: 16-bit PPM not supported (rgb inputs are 8-bit)"
        ))),
        (b"P5", false) => {
            let need = w * h;
            if payload.len() != need {
                return Err(Error::parse(format!(
                    "{file}: payload {} bytes, expected {need}",
                    payload.len()
                )));
            }
            Ok(PnmImage::Gray8 {
                w,
                h,
                maxval: maxval16,
                data: payload.to_vec(),
            })
        }
        (b"P5", true) => {
            let need = w * h * 2;
            if payload.len() != need {
                return Err(Error::parse(format!(
                    "{file}: payload {} bytes, expected {need}",
                    payload.len()
                )));
            }
            let data = payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect();
            Ok(PnmImage::Gray16 {
                w,
                h,
                maxval: maxval16,
                data,
            })
        }
        _ => unreachable!(),
    }
}

fn header(magic: &str, w: usize, h: usize, maxval: u16) -> Vec<u8> {
    let mut s = String::new();
    let _ = write!(s, "{magic}\n{w} {h}\n{maxval}\n");
    s.into_bytes()
}

pub fn write_ppm8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::shape(format!(
            "write_ppm8: {} bytes for {w}x{h}x3",
            rgb.len()
        )));
    }
    let mut bytes = header("P6", w, h, 255);
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

pub fn write_pgm8(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::shape(format!(
            "write_pgm8: {} bytes for {w}x{h}",
            gray.len()
        )));
    }
    let mut bytes = header("P5", w, h, 255);
    bytes.extend_from_slice(gray);
    fs::write(path, bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

/// 8-bit PGM with an extra `#` comment line after the magic; used by the
/// heatmap dumps to document their min/max scaling.
pub fn write_pgm8_commented(
    path: &Path,
    w: usize,
    h: usize,
    gray: &[u8],
    comment: &str,
) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::shape(format!(
            "write_pgm8: {} bytes for {w}x{h}",
            gray.len()
        )));
    }
    let mut s = String::new();
    let _ = write!(s, "P5\n# {comment}\n{w} {h}\n255\n");
    let mut bytes = s.into_bytes();
    bytes.extend_from_slice(gray);
    fs::write(path, bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

pub fn write_pgm16(path: &Path, w: usize, h: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::shape(format!(
            "write_pgm16: {} samples for {w}x{h}",
            gray.len()
        )));
    }
    let mut bytes = header("P5", w, h, 65535);
    for &v in gray {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("geoseg-netpbm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm8_roundtrip_bit_exact() {
        let path = tmp("rt.ppm");
        let data: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 7 % 256) as u8).collect();
        write_ppm8(&path, 3, 2, &data).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(
            img,
            PnmImage::Rgb8 {
                w: 3,
                h: 2,
                maxval: 255,
                data
            }
        );
    }

    #[test]
    fn pgm16_roundtrip_and_big_endian() {
        let path = tmp("rt16.pgm");
        let data = vec![0u16, 1, 255, 256, 32768, 65535];
        write_pgm16(&path, 3, 2, &data).unwrap();
        let raw = std::fs::read(&path).unwrap();
        // Header "P5\n3 2\n65535\n" then big-endian payload.
        assert!(raw.starts_with(b"P5\n3 2\n65535\n"));
        let off = raw.len() - 12;
        assert_eq!(&raw[off + 8..off + 10], &[0x80, 0x00]); // 32768
        match read_pnm(&path).unwrap() {
            PnmImage::Gray16 { data: d, .. } => assert_eq!(d, data),
            other => panic!("wrong variant {other:?}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmp("comment.pgm");
        let mut bytes = b"P5\n# a comment line\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        std::fs::write(&path, bytes).unwrap();
        match read_pnm(&path).unwrap() {
            PnmImage::Gray8 { w, h, data, .. } => {
                assert_eq!((w, h), (2, 1));
                assert_eq!(data, vec![7, 9]);
            }
            other => panic!("wrong variant {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_parse_error_naming_the_file() {
        let path = tmp("trunc.pgm");
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 7]); // needs 16
        std::fs::write(&path, bytes).unwrap();
        let err = read_pnm(&path).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(err.to_string().contains("trunc.pgm"));
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("bad.pgm");
        std::fs::write(&path, b"P3\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pnm(&path), Err(Error::Parse(_))));
    }
}
