//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::new(width, height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                let src = (sy * self.width + sx) * 3;
                let dst = (y * width + x) * 3;
                out.pixels[dst..dst + 3].copy_from_slice(&self.pixels[src..src + 3]);
            }
        }
        out
    }

    /// `[H, W, 3]` values in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

fn encode(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode("P5", img.width, img.height, &img.pixels)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode("P6", img.width, img.height, &img.pixels)
}

/// Parses the header; returns `(width, height, offset of pixel data)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Data(format!(
            "expected {} image",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("malformed header at byte {pos}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("header value too large at byte {start}")))?;
    }
    if fields[2] != 255 {
        return Err(Error::Data(format!("only maxval 255 is supported, got {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Data("missing whitespace after header".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, at) = parse_header(bytes, b"P5")?;
    let n = width * height;
    let pixels = bytes
        .get(at..at + n)
        .ok_or_else(|| Error::Data(format!("PGM body truncated: need {n} bytes")))?
        .to_vec();
    Ok(GrayImage { width, height, pixels })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, at) = parse_header(bytes, b"P6")?;
    let n = width * height * 3;
    let pixels = bytes
        .get(at..at + n)
        .ok_or_else(|| Error::Data(format!("PPM body truncated: need {n} bytes")))?
        .to_vec();
    Ok(RgbImage { width, height, pixels })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let img = GrayImage {
            width: 2,
            height: 1,
            pixels: vec![0, 255],
        };
        assert_eq!(encode_pgm(&img), b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P6 # made by hand\n1 1\n# max\n255\n\x01\x02\x03";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn nearest_resize_replicates_blocks() {
        let mut img = RgbImage::new(2, 2);
        img.pixels[3..6].copy_from_slice(&[9, 9, 9]);
        let big = img.resized(4, 4);
        assert_eq!(big.get(2, 0), [9, 9, 9]);
        assert_eq!(big.get(3, 1), [9, 9, 9]);
        assert_eq!(big.get(1, 1), [0, 0, 0]);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let pixels = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
            let img = RgbImage { width: w, height: h, pixels };
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }

        #[test]
        fn pgm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let pixels = (0..w * h).map(|_| rng.below(256) as u8).collect();
            let img = GrayImage { width: w, height: h, pixels };
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
