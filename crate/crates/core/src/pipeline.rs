//! End-to-end compression of one frame or label map into container bytes.

use crate::codec::{compression_ratio, CompressedFile, RatioMode};
use crate::error::Result;
use crate::grid::{ClassTable, LabelMap, PolarFrame};
use crate::segmenter::{extract_contours, segment_frame, ClassifierModel, ContourSet};

#[derive(Debug, Clone)]
pub struct Compressed {
    pub file: CompressedFile,
    pub bytes: Vec<u8>,
    pub contours: ContourSet,
    /// Pixel labels the contours were extracted from.
    pub labels: LabelMap,
}

impl Compressed {
    pub fn ratio(&self, mode: RatioMode) -> f64 {
        compression_ratio(&self.file.header, mode)
    }
}

fn package(labels: LabelMap, contours: ContourSet, frequency_khz: u32) -> Result<Compressed> {
    let file = CompressedFile::from_contour_set(&labels.geometry, frequency_khz, &contours)?;
    let bytes = file.to_bytes()?;
    Ok(Compressed {
        file,
        bytes,
        contours,
        labels,
    })
}

/// Features, classification, contour extraction and serialization.
pub fn compress_frame(frame: &PolarFrame, model: &ClassifierModel, frequency_khz: u32) -> Result<Compressed> {
    let seg = segment_frame(frame, model)?;
    package(seg.labels, seg.contours, frequency_khz)
}

/// Skips the classifier and extracts contours from given labels.
pub fn compress_labels(labels: &LabelMap, table: &ClassTable, frequency_khz: u32) -> Result<Compressed> {
    let contours = extract_contours(labels, table)?;
    package(labels.clone(), contours, frequency_khz)
}
