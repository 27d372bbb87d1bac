//! Training-free cross-view geo-localization: multi-scale descriptor
//! aggregation, domain-wise PCA with orthogonal Procrustes alignment, exact
//! cosine retrieval and the standard retrieval metrics.

pub mod aggregation;
pub mod alignment;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod feature_store;
pub mod io_util;
pub mod pipeline;
pub mod pooling;
pub mod retrieval;
pub mod synth;

pub use aggregation::{aggregate, AggregationSpec, ScaleSums};
pub use alignment::{
    fit_alignment, AlignMode, AlignParams, AlignedSet, AlignmentModel, DimSelection,
    PairingStrategy,
};
pub use config::PipelineConfig;
pub use descriptor::{Descriptor, DescriptorSet};
pub use error::{Error, ErrorKind, Result};
pub use evaluation::{EvalReport, GroundTruth};
pub use feature_store::{Dataset, Domain, FeatureMap, ImageMeta};
pub use pooling::{PoolingKind, PoolingSpec};
pub use retrieval::{Hit, RankedResult};
pub use synth::SynthSpec;
