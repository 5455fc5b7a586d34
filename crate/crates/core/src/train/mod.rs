//! Warm-up, bottleneck training, evaluation and reports.

mod config;
mod eval;
mod experiment;
mod optim;
mod report;
mod trainer;
mod warmup;

pub use config::{OptimizerKind, TrainConfig, Variant};
pub use eval::{
    corrupted_sample, embed_dataset, evaluate, evaluate_embedded, DecodePath, EmbeddedSet, EvalStats,
    CAPTION_MAX_WORDS, EVAL_CHUNK,
};
pub use experiment::{corruption_rows, run_embedded, run_experiment, Experiment};
pub use optim::{Adam, Sgd, StageOptimizer};
pub use report::{
    config_hash, emit_report, parse_csv, version_string, CsvRow, MetricsReport, ReportRow, CSV_COLUMNS,
};
pub use trainer::{caption_set, train, train_caption_head, train_embedded, EpochLoss, TrainOptions, TrainRun};
pub use warmup::{attribute_caption, distractor_ids, next_word_distribution, warmup_pretrain, CAPTION_INPUT_LEN};
