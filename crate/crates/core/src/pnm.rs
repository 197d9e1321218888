//! Binary PNM image files: P6 (color, 8-bit RGB) and P5 (grayscale).
//!
//! Writers emit the canonical header `P6\n<W> <H>\n255\n` followed by raw
//! bytes. The reader accepts standard PNM whitespace and `#` comments.
//! Parse failures report the byte offset of the offending field.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `img` (`[3,H,W]`, values in [0,1]) as a binary P6 file.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dimension(format!(
            "P6 writer expects [3,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = img.to_vec();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(data[(c * h + y) * w + x]));
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a grayscale byte plane (`h*w` values, row-major) as binary P5.
pub fn write_pgm(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::dimension(format!(
            "P5 writer got {} bytes for {h}x{w}",
            data.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn parse_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        let mut value = 0usize;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.buf[self.pos] - b'0') as usize))
                .ok_or_else(|| Error::format(start as u64, format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(
                start as u64,
                format!("expected {what}, found no digits"),
            ));
        }
        Ok(value)
    }

    /// The header ends with exactly one whitespace byte before pixel data.
    fn expect_data_separator(&mut self) -> Result<()> {
        if self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::format(
                self.pos as u64,
                "expected whitespace before pixel data",
            ))
        }
    }
}

fn parse_header(buf: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic, expected {}",
                std::str::from_utf8(magic).unwrap()
            ),
        ));
    }
    let mut cur = Cursor { buf, pos: 2 };
    let w = cur.parse_uint("width")?;
    let h = cur.parse_uint("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.parse_uint("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at as u64,
            format!("unsupported maxval {maxval}, only 255"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(2, format!("degenerate size {w}x{h}")));
    }
    cur.expect_data_separator()?;
    Ok((w, h, cur.pos))
}

/// Reads a binary P6 file into a `[3,H,W]` tensor with values `byte/255`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path)?;
    let (w, h, data_at) = parse_header(&buf, b"P6")?;
    let need = 3 * h * w;
    let pixels = &buf[data_at..];
    if pixels.len() < need {
        return Err(Error::format(
            buf.len() as u64,
            format!("pixel data truncated: need {need} bytes, have {}", pixels.len()),
        ));
    }
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let byte = pixels[(y * w + x) * 3 + c];
                data[(c * h + y) * w + x] = byte as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Reads a binary P5 file into `(bytes, h, w)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let buf = fs::read(path)?;
    let (w, h, data_at) = parse_header(&buf, b"P5")?;
    let need = h * w;
    let pixels = &buf[data_at..];
    if pixels.len() < need {
        return Err(Error::format(
            buf.len() as u64,
            format!("pixel data truncated: need {need} bytes, have {}", pixels.len()),
        ));
    }
    Ok((pixels[..need].to_vec(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_pristine;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mobileiqa-pnm-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_round_trip_is_exact_after_quantization() {
        let img = gen_pristine(21, 32, 40);
        let path = tmp("rt.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 32, 40]);
        for (&orig, &read) in img.to_vec().iter().zip(back.to_vec().iter()) {
            assert_eq!(read, quantize(orig) as f32 / 255.0);
        }
        // A second trip through the 8-bit lattice is the identity.
        write_ppm(&path, &back).unwrap();
        let again = read_ppm(&path).unwrap();
        assert_eq!(again.to_vec(), back.to_vec());
    }

    #[test]
    fn ppm_header_is_canonical() {
        let img = Tensor::full(vec![3, 2, 5], 1.0);
        let path = tmp("hdr.ppm");
        write_ppm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n5 2\n255\n"));
        assert_eq!(bytes.len(), b"P6\n5 2\n255\n".len() + 3 * 2 * 5);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let path = tmp("magic.ppm");
        fs::write(&path, b"P3\n2 2\n255\n").unwrap();
        match read_ppm(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_pixels_report_end_offset() {
        let path = tmp("trunc.ppm");
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[7u8; 10]); // need 48
        fs::write(&path, &bytes).unwrap();
        match read_ppm(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, bytes.len() as u64);
                assert!(msg.contains("48"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_maxval_rejected_at_its_offset() {
        let path = tmp("maxval.ppm");
        fs::write(&path, b"P6\n2 2\n65535\n").unwrap();
        match read_ppm(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 7);
                assert!(msg.contains("65535"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmp("comment.ppm");
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        fs::write(&path, &bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pgm_round_trip_and_length_check() {
        let path = tmp("map.pgm");
        let data: Vec<u8> = (0..12).map(|i| i * 20).collect();
        write_pgm(&path, &data, 3, 4).unwrap();
        let (back, h, w) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, data);
        assert!(write_pgm(&path, &data, 5, 4).is_err());
    }

    #[test]
    fn ppm_writer_rejects_non_rgb_shape() {
        let img = Tensor::full(vec![1, 4, 4], 0.5);
        assert!(write_ppm(&tmp("gray.ppm"), &img).is_err());
    }
}
