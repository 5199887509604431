//! Dataset ingestion, binary tensor container, run configuration, metrics
//! CSV emission, and the 2D PCA embedding used for latent visualization.

pub mod config;
pub mod container;
pub mod csv;
pub mod idx;
pub mod pca;

pub use config::{BetaValue, RunConfig};
pub use container::{find, parse_container, read_container, write_container, ElementType, Entry};
pub use csv::{write_metrics_csv, write_numeric_csv, MetricsCsvWriter, METRICS_HEADER};
pub use idx::{downsample_area, parse_idx, write_idx_u8};
pub use pca::{pca2d_embed, Embedding};
