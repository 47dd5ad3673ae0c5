//! 8-bit RGB rasters, HSV conversion and PPM (P6) file I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};
use thiserror::Error;

use crate::geom::{BBox, GeomError, Mask};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Codec { path: String, message: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(3 * width as usize * height as usize);
        for _ in 0..width as usize * height as usize {
            rgb.extend_from_slice(&color);
        }
        Self { width, height, rgb }
    }

    pub fn from_rgb(width: u32, height: u32, rgb: Vec<u8>) -> Option<Self> {
        (rgb.len() == 3 * width as usize * height as usize).then_some(Self { width, height, rgb })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn rgb_mut(&mut self) -> &mut [u8] {
        &mut self.rgb
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Paint every pixel of `mask` with the color returned for it.
    pub fn paint_mask(&mut self, mask: &Mask, mut color: impl FnMut(u32, u32) -> [u8; 3]) {
        debug_assert_eq!((mask.width(), mask.height()), (self.width, self.height));
        for (y, a, b) in mask.row_spans() {
            for x in a..b {
                self.set_pixel(x, y, color(x, y));
            }
        }
    }

    pub fn crop(&self, bbox: &BBox) -> Result<Raster, GeomError> {
        bbox.check_within(self.width, self.height)?;
        let (w, h) = (bbox.width(), bbox.height());
        let mut rgb = Vec::with_capacity(3 * w as usize * h as usize);
        for y in bbox.y0..bbox.y1 {
            let row = 3 * (y as usize * self.width as usize);
            rgb.extend_from_slice(&self.rgb[row + 3 * bbox.x0 as usize..row + 3 * bbox.x1 as usize]);
        }
        Ok(Raster { width: w, height: h, rgb })
    }

    /// Nearest-neighbour resample to `width x height`.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Raster {
        let mut out = Raster::filled(width, height, [0, 0, 0]);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                let sx = nearest_source(x, width, self.width);
                out.set_pixel(x, y, self.pixel(sx, sy));
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), RasterError> {
        let io_err = |source| RasterError::Io { path: path.display().to_string(), source };
        let file = File::create(path).map_err(io_err)?;
        let encoder = PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        encoder
            .write_image(&self.rgb, self.width, self.height, ExtendedColorType::Rgb8)
            .map_err(|e| RasterError::Codec { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn read_ppm(path: &Path) -> Result<Raster, RasterError> {
        let codec = |message: String| RasterError::Codec { path: path.display().to_string(), message };
        let file = File::open(path).map_err(|source| RasterError::Io { path: path.display().to_string(), source })?;
        let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| codec(e.to_string()))?;
        if decoder.color_type() != image::ColorType::Rgb8 {
            return Err(codec(format!("expected 8-bit RGB, found {:?}", decoder.color_type())));
        }
        let (w, h) = decoder.dimensions();
        let mut rgb = vec![0u8; decoder.total_bytes() as usize];
        decoder.read_image(&mut rgb).map_err(|e| codec(e.to_string()))?;
        Raster::from_rgb(w, h, rgb).ok_or_else(|| codec("pixel buffer size mismatch".into()))
    }
}

/// Source index sampled at the center of destination cell `i`.
pub(crate) fn nearest_source(i: u32, dst: u32, src: u32) -> u32 {
    let s = ((u64::from(i) * 2 + 1) * u64::from(src) / (2 * u64::from(dst))) as u32;
    s.min(src - 1)
}

/// RGB to (hue degrees in [0, 360), saturation, value), all from 8-bit input.
pub fn rgb_to_hsv(c: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = c.map(|v| f64::from(v) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue.rem_euclid(360.0), sat, max)
}

pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [u8; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip_primaries() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), (0.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0, 0, 255]).0, 240.0);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        for c in [[240u8, 200, 20], [20, 60, 200], [10, 10, 10], [200, 100, 150]] {
            let (h, s, v) = rgb_to_hsv(c);
            assert_eq!(hsv_to_rgb(h, s, v), c);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut r = Raster::filled(5, 3, [1, 2, 3]);
        r.set_pixel(4, 2, [200, 100, 50]);
        r.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(Raster::read_ppm(&path).unwrap(), r);
        assert!(matches!(Raster::read_ppm(&dir.path().join("missing.ppm")), Err(RasterError::Io { .. })));
    }

    #[test]
    fn crop_and_resize() {
        let mut r = Raster::filled(10, 10, [0, 0, 0]);
        r.set_pixel(3, 4, [9, 9, 9]);
        let c = r.crop(&BBox::new(2, 2, 5, 9)).unwrap();
        assert_eq!((c.width(), c.height()), (3, 7));
        assert_eq!(c.pixel(1, 2), [9, 9, 9]);
        assert_eq!(r.crop(&BBox::new(0, 0, 10, 10)).unwrap(), r);
        assert!(r.crop(&BBox::new(5, 5, 11, 6)).is_err());
        let up = c.resize_nearest(6, 14);
        assert_eq!(up.pixel(2, 4), [9, 9, 9]);
        assert_eq!(up.pixel(3, 5), [9, 9, 9]);
        assert_eq!(up.pixel(0, 0), [0, 0, 0]);
    }
}
