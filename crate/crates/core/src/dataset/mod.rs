//! LUNA16-style ingestion, label derivation and synthetic phantoms.

mod annotations;
mod export;
mod labels;
pub mod metaimage;
mod patches;
mod phantom;
mod prep;
mod split;

pub use annotations::{parse_annotations, write_annotations, Malignancy, NoduleAnnotation};
pub use export::{read_slice_png, to_gray8, write_slice_png};
pub use labels::{format_yolo_labels, parse_yolo_labels, read_yolo_labels, slice_bounding_boxes, write_yolo_labels, YoloLabelRecord, MIN_BOX_PIXELS};
pub use metaimage::{load_label_image, load_metaimage, write_metaimage, VoxelData};
pub use patches::{crop_patch, extract_classifier_patch, nearest_voxel, NodulePatch, PatchSource, PATCH_SIZE};
pub use phantom::{
    generate_phantom, read_phantom_bundle, write_phantom_bundle, Bundle, Ellipsoid, Phantom, PhantomManifest, PhantomSpec, BUNDLE_ANNOTATIONS,
    BUNDLE_MANIFEST, BUNDLE_MASK, BUNDLE_VOLUME,
};
pub use prep::{
    classifier_patches, detection_samples, prepare_case, read_detection_samples, read_patch_bundle, write_detection_samples, write_patch_bundle,
    DetectionSample, PreparedCase,
};
pub use split::{holdout_indices, partition_sizes, split_dataset};
