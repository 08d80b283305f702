//! Per-pixel class maps.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageError, ImageResult};
use serde::{Deserialize, Serialize};

/// Label value excluded from the loss and from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major `[H, W]` map of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Option<Self> {
        (height * width == data.len()).then_some(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Pixel count per class id below `classes`; ignored pixels are skipped.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &c in &self.data {
            if (c as usize) < classes {
                h[c as usize] += 1;
            }
        }
        h
    }
}

/// Fixed colours for rendering class maps; ignored pixels are drawn black.
pub const PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128],
    [70, 70, 70],
    [220, 220, 0],
    [107, 142, 35],
    [220, 20, 60],
    [0, 0, 142],
    [0, 160, 160],
    [250, 170, 30],
];

fn to_u32(v: usize) -> ImageResult<u32> {
    u32::try_from(v).map_err(|_| {
        ImageError::Limits(image::error::LimitError::from_kind(
            image::error::LimitErrorKind::DimensionError,
        ))
    })
}

impl ClassMap {
    /// Nearest-neighbour resampling that picks the source pixel under each
    /// destination pixel centre.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        let mut out = Self::filled(height, width, 0);
        for y in 0..height {
            let sy = (2 * y + 1) * self.height / (2 * height);
            for x in 0..width {
                let sx = (2 * x + 1) * self.width / (2 * width);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Read an 8-bit single-channel PGM whose gray levels are class ids.
    pub fn read_pgm(path: impl AsRef<Path>) -> ImageResult<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(ImageError::Unsupported(image::error::UnsupportedError::from_format_and_kind(
                    image::error::ImageFormatHint::Name("PGM".into()),
                    image::error::UnsupportedErrorKind::Color(other.color().into()),
                )))
            }
        };
        let (w, h) = gray.dimensions();
        Ok(Self::new(h as usize, w as usize, gray.into_raw()).expect("decoder returns w*h samples"))
    }

    /// Write as a binary (P5) PGM, one gray level per class id.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> ImageResult<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.data, to_u32(self.width)?, to_u32(self.height)?, ExtendedColorType::L8)
    }

    /// Write as a binary (P6) PPM using `palette`, cycling for high class ids.
    pub fn write_ppm(&self, path: impl AsRef<Path>, palette: &[[u8; 3]]) -> ImageResult<()> {
        let rgb: Vec<u8> = self
            .data
            .iter()
            .flat_map(|&c| match c {
                IGNORE_LABEL => [0, 0, 0],
                c => palette[c as usize % palette.len()],
            })
            .collect();
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&rgb, to_u32(self.width)?, to_u32(self.height)?, ExtendedColorType::Rgb8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        let map = ClassMap::new(2, 3, vec![0, 1, 2, 3, 255, 5]).unwrap();
        map.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert!(bytes.ends_with(&[0, 1, 2, 3, 255, 5]));
        assert_eq!(ClassMap::read_pgm(&path).unwrap(), map);
    }

    #[test]
    fn ppm_uses_palette() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        ClassMap::new(1, 2, vec![1, IGNORE_LABEL]).unwrap().write_ppm(&path, &PALETTE).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        let mut tail = PALETTE[1].to_vec();
        tail.extend([0, 0, 0]);
        assert!(bytes.ends_with(&tail));
    }

    #[test]
    fn resample_identity_and_downscale() {
        let map = ClassMap::new(2, 4, vec![0, 0, 1, 1, 2, 2, 3, 3]).unwrap();
        assert_eq!(map.resample(2, 4), map);
        assert_eq!(map.resample(1, 2).data(), &[2, 3]);
    }
}
