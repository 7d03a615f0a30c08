//! Synthetic dataset generation, on-disk container, augmentation and the
//! sequence reformulation of paired modalities.

pub mod augment;
pub mod generate;
pub mod manifest;
pub mod raster;

pub use augment::{augment, AugmentConfig};
pub use generate::{generate_dataset, generate_scene, KNOWN_MODALITIES, MAX_CLASSES};
pub use manifest::{DatasetManifest, SceneEntry};
pub use raster::{load_array, load_labels, save_array, save_labels, LabelRaster};

use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// Ordered frames of one scene plus its ground-truth labels. Frames follow
/// the manifest's modality order and share `C x H x W`.
#[derive(Clone, Debug)]
pub struct ModalitySequence {
    pub frames: Vec<NdArray>,
    pub labels: LabelRaster,
    pub scene_id: String,
}

impl ModalitySequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.labels.h
    }

    pub fn width(&self) -> usize {
        self.labels.w
    }
}

/// Assemble aligned rasters into a sequence, preserving the given order.
pub fn make_sequence(
    frames: Vec<NdArray>,
    labels: LabelRaster,
    scene_id: &str,
) -> Result<ModalitySequence> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("sequence needs at least one frame".into()));
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch("frames must be [c,h,w]".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "frame {i} shape {:?} differs from {:?}",
                f.shape(),
                shape
            )));
        }
    }
    if shape[1] != labels.h || shape[2] != labels.w {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{} vs frames {}x{}",
            labels.h, labels.w, shape[1], shape[2]
        )));
    }
    Ok(ModalitySequence {
        frames,
        labels,
        scene_id: scene_id.to_string(),
    })
}

/// Load one manifest entry from disk into a sequence.
pub fn load_sequence(manifest: &DatasetManifest, scene: &SceneEntry) -> Result<ModalitySequence> {
    let mut frames = Vec::with_capacity(scene.frame_paths.len());
    for i in 0..scene.frame_paths.len() {
        frames.push(load_array(&manifest.frame_path(scene, i))?);
    }
    let labels = load_labels(&manifest.label_path(scene))?;
    labels.validate(manifest.num_classes)?;
    make_sequence(frames, labels, &scene.scene_id)
}
