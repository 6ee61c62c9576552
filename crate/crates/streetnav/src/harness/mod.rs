//! Dataset ingestion, experiment configuration, dispatch, and reports: the
//! library surface the `streetnav` binary is a thin wrapper over.

mod config;
mod dataset;
mod experiment;
mod gradsuite;
mod report;

pub use config::{parse_conv_stack, ConfigMap, DATA_ENV, KNOWN_KEYS};
pub use dataset::{
    load_dataset, load_dataset_lazy, write_full_task_line, write_nav_line, write_sdr_line,
    Dataset, DatasetError, LazyDataset, LazyFeatures,
};
pub use experiment::{run_experiment, Command, Invocation};
pub use gradsuite::{run_gradcheck_suite, GRADCHECK_EPS, GRADCHECK_TOLERANCE};
pub use report::{ExampleRecord, Report, REPORT_SCHEMA};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
    #[error(transparent)]
    Sdr(#[from] crate::sdr::SdrError),
    #[error(transparent)]
    Nav(#[from] crate::nav::NavError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Route(#[from] crate::routes::RouteError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}
