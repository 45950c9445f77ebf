//! In-memory paired-image datasets and label lookup.

use crate::imaging::{Image, ImageError};
use crate::losses::Target;
use crate::model::{forward_batch, HierarchicalOutput, Modality, ModelError, ModelState, View};
use crate::synthgen::ImagePair;
use crate::taxonomy::{
    parse_manifest, partition_subsets, split_id_ood, LesionRecord, RecordLabel, Split, SubsetPartition,
    SubsetThresholds, Taxonomy, TaxonomyError,
};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("image `{path}`: {source}")]
    Image { path: String, source: ImageError },
    #[error("record/image count mismatch: {records} records, {images} image pairs")]
    CountMismatch { records: usize, images: usize },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Records with their decoded images, stored as 8-bit RGB.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub records: Vec<LesionRecord>,
    pixels: Vec<[Vec<u8>; 2]>,
}

impl Dataset {
    /// Decodes every referenced image, resizing to `image_size`.
    pub fn load(records: Vec<LesionRecord>, image_size: usize) -> Result<Self, DatasetError> {
        let mut pixels = Vec::with_capacity(records.len());
        for r in &records {
            let load = |p: &Path| {
                Image::load(p, image_size)
                    .map(|i| i.to_bytes())
                    .map_err(|source| DatasetError::Image {
                        path: p.display().to_string(),
                        source,
                    })
            };
            pixels.push([load(&r.clinical_ref)?, load(&r.dermoscopic_ref)?]);
        }
        Ok(Self {
            image_size,
            records,
            pixels,
        })
    }

    pub fn from_manifest(manifest: &Path, taxonomy: &Taxonomy, image_size: usize) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(manifest)?;
        let records = parse_manifest(&text, taxonomy, manifest.parent())?;
        Self::load(records, image_size)
    }

    pub fn from_pairs(records: Vec<LesionRecord>, pairs: &[ImagePair]) -> Result<Self, DatasetError> {
        if records.len() != pairs.len() {
            return Err(DatasetError::CountMismatch {
                records: records.len(),
                images: pairs.len(),
            });
        }
        let image_size = pairs.first().map_or(0, |p| p.clinical.size);
        let pixels = pairs
            .iter()
            .map(|p| [p.clinical.to_bytes(), p.dermoscopic.to_bytes()])
            .collect();
        Ok(Self {
            image_size,
            records,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, idx: usize, view: View) -> Image {
        let slot = match view {
            View::Clinical => 0,
            View::Dermoscopic => 1,
        };
        Image::from_bytes(self.image_size, &self.pixels[idx][slot])
    }

    /// The images a model of `modality` consumes for one record.
    pub fn views(&self, idx: usize, modality: Modality) -> Vec<Image> {
        views_of(modality).iter().map(|v| self.image(idx, *v)).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Records of `split` whose label is in-distribution.
    pub fn id_indices(&self, split: Split, taxonomy: &Taxonomy) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.records[i].split == split && self.records[i].is_id(taxonomy))
            .collect()
    }
}

pub fn views_of(modality: Modality) -> &'static [View] {
    match modality {
        Modality::Clinical => &[View::Clinical],
        Modality::Dermoscopic => &[View::Dermoscopic],
        Modality::Multimodal => &[View::Clinical, View::Dermoscopic],
    }
}

/// Training target of an in-distribution label.
pub fn target_of(taxonomy: &Taxonomy, label: &RecordLabel) -> Option<Target> {
    let p = label.known()?;
    Some(Target {
        l1: p.l1,
        l2: p.l2,
        l3: taxonomy.id_position(p.l3)?,
    })
}

/// Applies the ID/OOD split to `taxonomy` and partitions the ID categories.
pub fn prepare_taxonomy(
    taxonomy: &Taxonomy,
    ood_cutoff: u64,
    ood_percentile: f64,
    thresholds: SubsetThresholds,
) -> Result<(Taxonomy, SubsetPartition), TaxonomyError> {
    let counts = taxonomy.count_vector();
    let (id, _) = split_id_ood(&counts, ood_cutoff, ood_percentile)?;
    let mut t = taxonomy.clone();
    t.apply_id_set(&id);
    let p = partition_subsets(&counts, &t.id_flags, thresholds)?;
    Ok((t, p))
}

/// Restores the in-distribution flags of `id` on a taxonomy.
pub fn with_id_set(taxonomy: &Taxonomy, id: &BTreeSet<usize>) -> Taxonomy {
    let mut t = taxonomy.clone();
    t.apply_id_set(id);
    t
}

pub const INFERENCE_BATCH: usize = 64;

/// Batched inference over `indices` of `ds`.
pub fn infer_outputs(model: &ModelState, ds: &Dataset, indices: &[usize]) -> Result<Vec<HierarchicalOutput>, ModelError> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(INFERENCE_BATCH) {
        let images: Vec<Vec<Image>> = chunk.iter().map(|&i| ds.views(i, model.config.modality)).collect();
        let samples: Vec<Vec<&Image>> = images.iter().map(|v| v.iter().collect()).collect();
        out.extend(forward_batch(model, &samples)?);
    }
    Ok(out)
}
