//! Series types, synthetic generation, dataset files and batch preprocessing.

mod batch;
mod io;
mod series;
mod synth;

pub use batch::{preprocess_batch, BatchConfig, BatchItem, ShuffleConfig, ShuffleMode};
pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset, LoadOptions};
pub use series::{test_split_start, FreqUnit, Frequency, MetricType, MultivariateSeries};
pub use synth::{ar2_is_stationary, generate_synthetic, Components, ResidualDist, SynthConfig};
