//! Classification of multi-view cases on heterogeneous graphs, with
//! imputation of missing views.

pub mod autodiff;
pub mod case;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod imputation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Manifest, Task};
pub use error::{Error, Result};
