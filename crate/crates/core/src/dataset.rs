//! UCI optical-recognition handwritten digits corpus: parsing, seeded
//! splits, and input normalization.
//!
//! The on-disk format is one record per line, 65 comma-separated decimal
//! integers: 64 pixel gray levels in `0..=16` followed by the digit label.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixels per image (8x8).
pub const IMAGE_PIXELS: usize = 64;
/// Maximum gray level; levels run 0..=16 (17 levels).
pub const MAX_GRAY: u8 = 16;
/// Digit classes.
pub const NUM_CLASSES: usize = 10;
/// Size of the canonical corpus.
pub const CORPUS_SIZE: usize = 1797;

/// One 8x8 17-gray-level labeled digit image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigitImage {
    pixels: Vec<u8>,
    label: u8,
}

impl DigitImage {
    pub fn new(pixels: Vec<u8>, label: u8) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Dimension(format!(
                "expected {IMAGE_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if let Some(pos) = pixels.iter().position(|&p| p > MAX_GRAY) {
            return Err(Error::OutOfRange(format!(
                "pixel {pos} has gray level {} (max {MAX_GRAY})",
                pixels[pos]
            )));
        }
        if label as usize >= NUM_CLASSES {
            return Err(Error::OutOfRange(format!("label {label} (max 9)")));
        }
        Ok(Self { pixels, label })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// Input vector for the network/circuit: pixel gray level divided by
    /// the maximum level, so each component lies in [0, 1].
    pub fn normalize(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&p| f64::from(p) / f64::from(MAX_GRAY))
            .collect()
    }

    /// Re-emit the source line for this record.
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(IMAGE_PIXELS * 3 + 2);
        for p in &self.pixels {
            s.push_str(&p.to_string());
            s.push(',');
        }
        s.push_str(&self.label.to_string());
        s
    }

    /// Parse one optdigits record. `line_no` is 1-based and only used in
    /// error messages.
    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != IMAGE_PIXELS + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 65 fields, got {}", fields.len()),
            });
        }
        let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
        for (pos, field) in fields[..IMAGE_PIXELS].iter().enumerate() {
            let value: i64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("field {pos}: not an integer: {field:?}"),
            })?;
            if !(0..=i64::from(MAX_GRAY)).contains(&value) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("pixel {pos} out of range 0..=16: {value}"),
                });
            }
            pixels.push(value as u8);
        }
        let label: i64 = fields[IMAGE_PIXELS].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("label is not an integer: {:?}", fields[IMAGE_PIXELS]),
        })?;
        if !(0..NUM_CLASSES as i64).contains(&label) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label out of range 0..=9: {label}"),
            });
        }
        Ok(Self {
            pixels,
            label: label as u8,
        })
    }
}

/// Deterministic train/test index split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// The corpus plus an optional split.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<DigitImage>,
    split: Option<Split>,
}

impl Dataset {
    pub fn from_images(images: Vec<DigitImage>) -> Self {
        Self {
            images,
            split: None,
        }
    }

    /// Load an optdigits text file. Blank lines are ignored; any malformed
    /// record aborts with its line number.
    pub fn load_optdigits(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut images = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            images.push(DigitImage::parse_line(line, idx + 1)?);
        }
        Ok(Self::from_images(images))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[DigitImage] {
        &self.images
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    /// Seeded Fisher-Yates shuffle of the index range, first `n_train`
    /// indices become the train set, the rest the test set. The same
    /// `(corpus, n_train, seed)` always yields the identical split.
    pub fn with_split(mut self, n_train: usize, seed: u64) -> Result<Self> {
        if n_train > self.images.len() {
            return Err(Error::Config(format!(
                "n_train {} exceeds corpus size {}",
                n_train,
                self.images.len()
            )));
        }
        let mut indices: Vec<usize> = (0..self.images.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fisher_yates(&mut indices, &mut rng);
        let test = indices.split_off(n_train);
        self.split = Some(Split {
            train: indices,
            test,
            seed,
        });
        Ok(self)
    }

    fn subset(&self, indices: &[usize]) -> Vec<DigitImage> {
        indices.iter().map(|&i| self.images[i].clone()).collect()
    }

    pub fn train_images(&self) -> Result<Vec<DigitImage>> {
        let split = self.require_split()?;
        Ok(self.subset(&split.train))
    }

    pub fn test_images(&self) -> Result<Vec<DigitImage>> {
        let split = self.require_split()?;
        Ok(self.subset(&split.test))
    }

    pub fn test_indices(&self) -> Result<&[usize]> {
        Ok(&self.require_split()?.test)
    }

    fn require_split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no split".into()))
    }

    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut hist = [0usize; NUM_CLASSES];
        for img in &self.images {
            hist[img.label() as usize] += 1;
        }
        hist
    }
}

/// [`Dataset::with_split`] on a borrowed corpus.
pub fn split_dataset(ds: &Dataset, n_train: usize, seed: u64) -> Result<Dataset> {
    ds.clone().with_split(n_train, seed)
}

fn fisher_yates(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn zeros_line(label: u8) -> String {
        let mut s = "0,".repeat(IMAGE_PIXELS);
        s.push_str(&label.to_string());
        s
    }

    #[test]
    fn parse_zero_line() {
        let img = DigitImage::parse_line(&zeros_line(3), 1).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0));
        assert_eq!(img.label(), 3);
    }

    #[test]
    fn parse_rejects_bad_pixel_with_position() {
        let mut fields = vec!["0"; 65];
        fields[12] = "17";
        let err = DigitImage::parse_line(&fields.join(","), 42).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 42"), "{msg}");
        assert!(msg.contains("pixel 12"), "{msg}");
    }

    #[test]
    fn parse_rejects_bad_label() {
        let mut fields = vec!["0"; 65];
        fields[64] = "10";
        let err = DigitImage::parse_line(&fields.join(","), 7).unwrap_err();
        assert!(err.to_string().contains("label out of range"));
    }

    #[test]
    fn parse_rejects_short_line() {
        let err = DigitImage::parse_line("1,2,3", 5).unwrap_err();
        assert!(err.to_string().contains("expected 65 fields"));
    }

    #[test]
    fn empty_file_loads_zero_images() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "").unwrap();
        let ds = Dataset::load_optdigits(f.path()).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn load_reports_line_numbers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", zeros_line(1)).unwrap();
        writeln!(f, "not,a,record").unwrap();
        let err = Dataset::load_optdigits(f.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn normalize_scales_by_max_gray() {
        let mut pixels = vec![0u8; IMAGE_PIXELS];
        pixels[0] = 16;
        pixels[1] = 8;
        let img = DigitImage::new(pixels, 0).unwrap();
        let v = img.normalize();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.5);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let images: Vec<DigitImage> = (0..100)
            .map(|i| DigitImage::new(vec![0; IMAGE_PIXELS], (i % 10) as u8).unwrap())
            .collect();
        let a = Dataset::from_images(images.clone())
            .with_split(80, 11)
            .unwrap();
        let b = Dataset::from_images(images).with_split(80, 11).unwrap();
        assert_eq!(a.split(), b.split());

        let split = a.split().unwrap();
        assert_eq!(split.train.len(), 80);
        assert_eq!(split.test.len(), 20);
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_boundary_and_error() {
        let images: Vec<DigitImage> = (0..5)
            .map(|_| DigitImage::new(vec![0; IMAGE_PIXELS], 0).unwrap())
            .collect();
        let ds = Dataset::from_images(images.clone()).with_split(5, 0).unwrap();
        assert!(ds.split().unwrap().test.is_empty());
        assert!(Dataset::from_images(images).with_split(6, 0).is_err());
    }
}
