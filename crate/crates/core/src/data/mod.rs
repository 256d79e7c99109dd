//! Bags of patch features, their on-disk formats, and corpus statistics.

mod manifest;
mod seqf;
mod stats;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, write_dataset, Manifest, ManifestRow, MANIFEST_HEADER};
pub use seqf::{
    decode_sequence, encode_sequence, read_integer_file, read_sequence_file, write_integer_file,
    write_sequence_file,
};
pub use stats::{corpus_stats, long_sequence_split, percentile_threshold, CorpusStats};

/// One slide: an ordered sequence of `L` feature vectors and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub features: Array2<f32>,
    pub slide_label: usize,
    pub patch_labels: Option<Vec<usize>>,
    /// `(row, col)` grid position of every patch.
    pub coords: Option<Vec<(i64, i64)>>,
}

impl Bag {
    pub fn new(id: impl Into<String>, features: Array2<f32>, slide_label: usize) -> Result<Self> {
        let bag = Self {
            id: id.into(),
            features,
            slide_label,
            patch_labels: None,
            coords: None,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn with_patch_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        self.patch_labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_coords(mut self, coords: Vec<(i64, i64)>) -> Result<Self> {
        self.coords = Some(coords);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyBag);
        }
        let len = self.len();
        if let Some(p) = &self.patch_labels {
            if p.len() != len {
                return Err(Error::DimensionMismatch { expected: len, got: p.len() });
            }
        }
        if let Some(c) = &self.coords {
            if c.len() != len {
                return Err(Error::DimensionMismatch { expected: len, got: c.len() });
            }
        }
        Ok(())
    }
}
