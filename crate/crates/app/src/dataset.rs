//! Datasets on disk: `<stem>.png` images with `<stem>.jsonl` annotation
//! records beside them.

use std::path::Path;

use anyhow::Context;
use lymphdet_core::annotation::{read_records, AnnotationSet};
use lymphdet_core::raster::RgbImage;
use lymphdet_core::stain::StainReference;
use lymphdet_core::trainer::TrainingSample;

pub struct AnnotatedImage {
    pub stem: String,
    pub image: RgbImage,
    pub annotations: AnnotationSet,
}

/// Every image in `dir` that has an annotation file, sorted by name.
/// The file stem becomes the field-of-view id.
pub fn load_dir(dir: &Path) -> anyhow::Result<Vec<AnnotatedImage>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading dataset {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png") && p.with_extension("jsonl").exists())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|png| {
            let stem = png.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let image = RgbImage::load_png(&png).with_context(|| format!("loading {}", png.display()))?;
            let mut annotations = AnnotationSet::new(stem.clone());
            for record in read_records(png.with_extension("jsonl"))? {
                annotations.push(&record).with_context(|| format!("bad record in {stem}.jsonl"))?;
            }
            annotations.check_bounds(image.height(), image.width())?;
            Ok(AnnotatedImage { stem, image, annotations })
        })
        .collect()
}

pub fn to_samples(items: &[AnnotatedImage], r1: f64, stain: Option<&StainReference>) -> anyhow::Result<Vec<TrainingSample>> {
    items
        .iter()
        .map(|a| Ok(TrainingSample::from_annotations(&a.image, &a.annotations, r1, stain)?))
        .collect()
}
