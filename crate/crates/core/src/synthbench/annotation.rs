//! JSON annotation and prediction files, and on-disk datasets
//! (`<name>.png` next to `<name>.json`).

use std::collections::BTreeSet;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::edgeless::EdgelessMode;
use crate::boxes::BoxXYWH;
use crate::error::{arg_err, Result, TmrError};

mod box_list {
    use super::*;

    pub fn serialize<S: Serializer>(
        boxes: &[BoxXYWH],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(boxes.iter().map(|b| b.to_array()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<BoxXYWH>, D::Error> {
        let raw: Vec<[f64; 4]> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(BoxXYWH::from_array).collect())
    }
}

mod scored_list {
    use super::*;

    pub fn serialize<S: Serializer>(
        dets: &[(BoxXYWH, f64)],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(dets.iter().map(|(b, sc)| [b.cx, b.cy, b.w, b.h, *sc]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<(BoxXYWH, f64)>, D::Error> {
        let raw: Vec<[f64; 5]> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|[cx, cy, w, h, s]| (BoxXYWH::new_unchecked(cx, cy, w, h), s))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternAnnotation {
    pub id: u32,
    #[serde(with = "box_list")]
    pub exemplars: Vec<BoxXYWH>,
    #[serde(with = "box_list")]
    pub boxes: Vec<BoxXYWH>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAnnotation {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub patterns: Vec<PatternAnnotation>,
    /// Set once an edgeless crop has been applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edgeless: Option<EdgelessMode>,
}

impl SampleAnnotation {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for p in &self.patterns {
            if !ids.insert(p.id) {
                return arg_err(format!("{}: duplicate pattern id {}", self.image, p.id));
            }
            if p.boxes.is_empty() {
                return arg_err(format!("{}: pattern {} has no boxes", self.image, p.id));
            }
            for b in p.exemplars.iter().chain(&p.boxes) {
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn pattern(&self, id: u32) -> Option<&PatternAnnotation> {
        self.patterns.iter().find(|p| p.id == id)
    }
}

/// Scored boxes for one (image, pattern) query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub image: String,
    pub pattern: u32,
    #[serde(with = "scored_list")]
    pub boxes: Vec<(BoxXYWH, f64)>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    pub annotation: SampleAnnotation,
}

fn format_err(path: &Path, reason: impl Into<String>) -> TmrError {
    TmrError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes every sample as `<stem>.png` plus `<stem>.json`.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for s in samples {
        let png = dir.join(&s.annotation.image);
        s.image.save_with_format(&png, image::ImageFormat::Png)?;
        write_json(png.with_extension("json"), &s.annotation)?;
    }
    Ok(())
}

/// Reads every `*.json` annotation in `dir` (sorted by name) with its image.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let annotation: SampleAnnotation = read_json(&p)?;
        annotation
            .validate()
            .map_err(|e| format_err(&p, e.to_string()))?;
        let image = image::open(dir.join(&annotation.image))?.to_rgb8();
        if (image.width(), image.height()) != (annotation.width, annotation.height) {
            return Err(format_err(&p, "image size disagrees with the annotation"));
        }
        out.push(Sample { image, annotation });
    }
    Ok(out)
}
