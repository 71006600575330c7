//! Demographic audit of image datasets: manifest and hierarchy loading,
//! face annotation, sharded annotation storage, aggregation into percentage
//! tables and synset rankings, stratified evaluation and a compression-based
//! diversity score.

pub mod aggregate;
pub mod config;
pub mod diversity;
pub mod eval;
pub mod hierarchy;
pub mod import;
pub mod manifest;
pub mod numeric;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod store;
pub mod stub;
pub mod worker;

pub use aggregate::{AggregateState, Percent, PercentTable, RankingFilters, SynsetRankRow};
pub use config::AuditConfig;
pub use hierarchy::{AuditSubset, Hierarchy};
pub use manifest::{ImageRecord, Manifest};
pub use protocol::{AgeGroup, AgePosterior, Annotator, FaceAnnotation, FaceDetection, Gender, GenderScore};
pub use store::AnnotationRecord;
