//! Label-free brain anomaly segmentation.
//!
//! A multimodal vision-transformer autoencoder is trained on healthy MRI
//! slices only. At inference, hyperintense reconstruction residuals are turned
//! into per-modality masks by a threshold → Otsu → morphology → 3-D
//! connected-component → prompt-refinement chain, and the T1c and T2f masks
//! are fused into enhancing tumour, non-enhancing tumour and surrounding
//! FLAIR hyperintensity labels. Lesion-wise Dice and detection rate score the
//! result. A seeded phantom generator stands in for real scans.

pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod postproc;
pub mod volume;

pub use error::{Error, Result};
pub use phantom::{generate_phantom, Phantom, PhantomSpec};
pub use volume::{Dims, LabelVolume, Modality, MultimodalVolume, NormalizationRecord, SliceBatch};
