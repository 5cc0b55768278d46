//! Bit-exact raster I/O (binary PPM/PGM, maxval 255), bilinear resizing to
//! the network resolution, and result rendering.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::refine::MaskU8;
use crate::tensor::Tensor3;

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "image dimensions must be >= 1");
        RgbImage {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height < 1 || width < 1 || data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "buffer length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        self.pixel_at(y * self.width + x)
    }

    #[inline]
    pub fn pixel_at(&self, i: usize) -> [u8; 3] {
        let o = i * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        self.set_pixel_at(y * self.width + x, rgb);
    }

    #[inline]
    pub fn set_pixel_at(&mut self, i: usize, rgb: [u8; 3]) {
        let o = i * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Scale pixel values to [0, 1] floats for the network.
    pub fn to_unit_tensor(&self) -> Tensor3<f32> {
        let data = self.data.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor3::from_data(self.height, self.width, 3, data).expect("buffer length matches")
    }
}

// ---------------------------------------------------------------------------
// PNM parsing

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        PnmCursor { bytes, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn magic(&mut self) -> Result<[u8; 2]> {
        if self.bytes.len() < 2 {
            return self.err("file too short for a PNM magic number");
        }
        let m = [self.bytes[0], self.bytes[1]];
        self.pos = 2;
        Ok(m)
    }

    /// Skip whitespace and `#` comment lines, per the PNM convention.
    fn skip_separators(&mut self) -> Result<()> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn uint(&mut self) -> Result<usize> {
        self.skip_separators()?;
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected an unsigned integer");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.err("integer out of range"), Ok)
    }

    /// Header fields end with exactly one whitespace byte before the payload.
    fn payload(&mut self, expected: usize) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return self.err("expected a single whitespace byte before the payload");
        }
        self.pos += 1;
        let available = self.bytes.len() - self.pos;
        if available < expected {
            return self.err(format!(
                "payload truncated: expected {expected} bytes, found {available}"
            ));
        }
        if available > expected {
            return self.err(format!(
                "trailing bytes after payload: expected {expected} bytes, found {available}"
            ));
        }
        Ok(&self.bytes[self.pos..])
    }

    fn header(&mut self, magic: [u8; 2]) -> Result<(usize, usize)> {
        let got = self.magic()?;
        if got != magic {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "bad magic: expected {}, found {}",
                    String::from_utf8_lossy(&magic),
                    String::from_utf8_lossy(&got)
                ),
            });
        }
        let width = self.uint()?;
        let height = self.uint()?;
        let maxval = self.uint()?;
        if maxval != 255 {
            return self.err(format!("only maxval 255 is supported, found {maxval}"));
        }
        if width == 0 || height == 0 {
            return self.err("image dimensions must be >= 1");
        }
        Ok((width, height))
    }
}

/// Decode a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut cur = PnmCursor::new(bytes);
    let (width, height) = cur.header(*b"P6")?;
    let payload = cur.payload(width * height * 3)?;
    RgbImage::from_raw(height, width, payload.to_vec())
}

/// Decode a binary PGM (P5, maxval 255) as a grayscale mask.
pub fn decode_pgm(bytes: &[u8]) -> Result<MaskU8> {
    let mut cur = PnmCursor::new(bytes);
    let (width, height) = cur.header(*b"P5")?;
    let payload = cur.payload(width * height)?;
    MaskU8::from_data(height, width, payload.to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn encode_pgm(mask: &MaskU8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.data());
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image))?)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<MaskU8> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(path: impl AsRef<Path>, mask: &MaskU8) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}

// ---------------------------------------------------------------------------
// Resizing and rendering

/// Direct (non-aspect-preserving) resize to a `side x side` square:
/// corner-aligned bilinear interpolation per channel, rounded half-up.
pub fn resize_bilinear(image: &RgbImage, side: usize) -> Result<RgbImage> {
    if side == 0 {
        return Err(Error::Dimension("resize target must be >= 1".into()));
    }
    if image.height == side && image.width == side {
        return Ok(image.clone());
    }
    let scale = |src: usize, dst: usize, i: usize| -> f32 {
        if dst > 1 {
            i as f32 * (src as f32 - 1.0) / (dst as f32 - 1.0)
        } else {
            0.0
        }
    };
    let mut out = RgbImage::new(side, side);
    for y in 0..side {
        let sy = scale(image.height, side, y);
        let y0 = (sy.floor() as usize).min(image.height - 1);
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = sy - y0 as f32;
        for x in 0..side {
            let sx = scale(image.width, side, x);
            let x0 = (sx.floor() as usize).min(image.width - 1);
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = sx - x0 as f32;
            let mut rgb = [0u8; 3];
            for (c, out_c) in rgb.iter_mut().enumerate() {
                let v00 = image.pixel(y0, x0)[c] as f32;
                let v01 = image.pixel(y0, x1)[c] as f32;
                let v10 = image.pixel(y1, x0)[c] as f32;
                let v11 = image.pixel(y1, x1)[c] as f32;
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                let v = top + (bottom - top) * fy;
                *out_c = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(y, x, rgb);
        }
    }
    Ok(out)
}

/// Superimpose the mask as a red tint: `out = (1 - a) * pixel + a * red`
/// with `a = 0.5 * mask / 255`, rounded half-up.
pub fn overlay(image: &RgbImage, mask: &MaskU8) -> Result<RgbImage> {
    if image.height != mask.height() || image.width != mask.width() {
        return Err(Error::Dimension(format!(
            "image {}x{} and mask {}x{} differ",
            image.height,
            image.width,
            mask.height(),
            mask.width()
        )));
    }
    let mut out = RgbImage::new(image.height, image.width);
    for i in 0..image.height * image.width {
        let a = 0.5 * mask.data()[i] as f32 / 255.0;
        let px = image.pixel_at(i);
        let blend = |v: u8, target: f32| ((1.0 - a) * v as f32 + a * target + 0.5).floor() as u8;
        out.set_pixel_at(i, [blend(px[0], 255.0), blend(px[1], 0.0), blend(px[2], 0.0)]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_white_ppm_bytes() {
        let mut img = RgbImage::new(1, 1);
        img.set_pixel(0, 0, [255, 255, 255]);
        let bytes = encode_ppm(&img);
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut img = RgbImage::new(3, 5);
        for i in 0..15 {
            img.set_pixel_at(i, [(i * 17) as u8, (i * 31) as u8, (255 - i) as u8]);
        }
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let mask = MaskU8::from_data(2, 4, vec![0, 1, 127, 128, 200, 255, 3, 9]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&mask)).unwrap(), mask);
    }

    #[test]
    fn parser_tolerates_comments_and_whitespace() {
        let bytes = b"P6 # a comment\n# another comment\n  2\t1 # sizes\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 1);
        assert_eq!(img.pixel(0, 1), [4, 5, 6]);
    }

    #[test]
    fn pgm_magic_rejected_as_color() {
        let err = decode_ppm(b"P5\n1 1\n255\n\x00").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("bad magic"), "{text}");
    }

    #[test]
    fn wrong_maxval_is_rejected() {
        let err = decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("maxval"));
    }

    #[test]
    fn truncated_payload_reports_the_offset() {
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        match err {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 11);
                assert!(message.contains("truncated"));
            }
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn resize_to_own_size_is_identity() {
        let mut img = RgbImage::new(4, 4);
        for i in 0..16 {
            img.set_pixel_at(i, [i as u8, (i * 2) as u8, (i * 3) as u8]);
        }
        assert_eq!(resize_bilinear(&img, 4).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let mut img = RgbImage::new(3, 7);
        for i in 0..21 {
            img.set_pixel_at(i, [9, 120, 200]);
        }
        let out = resize_bilinear(&img, 11).unwrap();
        assert!(out.data().chunks(3).all(|p| p == [9, 120, 200]));
    }

    #[test]
    fn resize_interpolates_with_half_up_rounding() {
        // A 1x2 row [0, 255] widened to 3 columns: midpoint 127.5 rounds up.
        let mut img = RgbImage::new(1, 2);
        img.set_pixel(0, 0, [0, 0, 0]);
        img.set_pixel(0, 1, [255, 255, 255]);
        let out = resize_bilinear(&img, 3).unwrap();
        assert_eq!(out.pixel(0, 0), [0, 0, 0]);
        assert_eq!(out.pixel(1, 1), [128, 128, 128]);
        assert_eq!(out.pixel(2, 2), [255, 255, 255]);
    }

    #[test]
    fn resize_stays_within_source_range() {
        let mut img = RgbImage::new(5, 5);
        for i in 0..25 {
            img.set_pixel_at(i, [(40 + i * 7) as u8, (10 + i) as u8, (200 - i * 3) as u8]);
        }
        let out = resize_bilinear(&img, 13).unwrap();
        for c in 0..3 {
            let (lo, hi) = (0..25).fold((255u8, 0u8), |(lo, hi), i| {
                let v = img.pixel_at(i)[c];
                (lo.min(v), hi.max(v))
            });
            for i in 0..13 * 13 {
                let v = out.pixel_at(i)[c];
                assert!(v >= lo && v <= hi);
            }
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = RgbImage::new(2, 2);
        assert!(resize_bilinear(&img, 0).is_err());
    }

    #[test]
    fn zero_mask_leaves_the_image_unchanged() {
        let mut img = RgbImage::new(2, 2);
        for i in 0..4 {
            img.set_pixel_at(i, [i as u8 * 50, 77, 128]);
        }
        let mask = MaskU8::zeros(2, 2);
        assert_eq!(overlay(&img, &mask).unwrap(), img);
    }

    #[test]
    fn full_mask_on_black_blends_to_half_red() {
        let img = RgbImage::new(1, 1);
        let mut mask = MaskU8::zeros(1, 1);
        mask.set(0, 0, 255);
        let out = overlay(&img, &mask).unwrap();
        assert_eq!(out.pixel(0, 0), [128, 0, 0]);
    }

    #[test]
    fn overlay_preserves_dimensions_and_checks_them() {
        let img = RgbImage::new(3, 4);
        let mask = MaskU8::zeros(3, 4);
        let out = overlay(&img, &mask).unwrap();
        assert_eq!((out.height(), out.width()), (3, 4));
        let bad = MaskU8::zeros(4, 3);
        assert!(overlay(&img, &bad).is_err());
    }

    #[test]
    fn unit_tensor_scales_by_255() {
        let mut img = RgbImage::new(1, 2);
        img.set_pixel(0, 0, [0, 51, 255]);
        let t = img.to_unit_tensor();
        assert_eq!(t.get(0, 0, 0), 0.0);
        assert_eq!(t.get(0, 0, 1), 0.2);
        assert_eq!(t.get(0, 0, 2), 1.0);
    }
}
