//! Image-set metrics: Fréchet distance over classifier features and an
//! inception-score analogue, labeled toy-FID / toy-IS since the extractor
//! is a seed-pinned trained classifier rather than a pretrained network.

pub mod classifier;
pub mod frechet;
pub mod inception;
pub mod linalg;
pub mod report;

pub use classifier::{train_eval_classifier, ClassifierConfig, EvalClassifier, FEAT_DIM};
pub use frechet::{fid, frechet_distance, FeatureSet};
pub use inception::inception_score;
pub use report::{write_metrics_csv, CategoryMetrics, CsvRow, MetricReport};
