use super::config::{TrainConfig, Variant};
use super::eval::{embed_dataset, evaluate_embedded, DecodePath, EmbeddedSet};
use super::report::{config_hash, version_string, MetricsReport, ReportRow};
use super::trainer::{check_vocab, train_caption_head, train_embedded, TrainOptions};
use crate::data::{Corruption, Dataset};
use crate::error::Result;
use crate::model::ModelParams;

impl Variant {
    /// The decoding path this row of the comparison is reported on.
    pub fn primary_path(self) -> DecodePath {
        match self {
            Variant::NoRepEval => DecodePath::NoRep,
            Variant::CaptionBaseline => DecodePath::Caption,
            _ => DecodePath::Hard,
        }
    }

    /// Paths evaluated on clean validation data after training.
    pub fn evaluated_paths(self) -> Vec<DecodePath> {
        match self {
            Variant::CaptionBaseline => vec![DecodePath::Caption],
            _ => vec![DecodePath::Soft, DecodePath::Hard, DecodePath::NoRep],
        }
    }

    /// Method label of report rows: the variant name on its own path,
    /// `variant/path` otherwise.
    pub fn method_label(self, path: DecodePath) -> String {
        if path == self.primary_path() {
            self.name().to_owned()
        } else {
            format!("{}/{}", self.name(), path.name())
        }
    }
}

/// Clean row plus one row per (kind, severity) for one path: 21 rows.
pub fn corruption_rows(
    params: &ModelParams,
    val: &Dataset,
    clean: &EmbeddedSet,
    path: DecodePath,
    method: &str,
) -> Result<Vec<ReportRow>> {
    let mut rows = vec![ReportRow::from_stats(method, "clean", 0, &evaluate_embedded(params, clean, path)?)];
    for c in Corruption::grid() {
        let set = embed_dataset(params, val, Some(c))?;
        let stats = evaluate_embedded(params, &set, path)?;
        rows.push(ReportRow::from_stats(method, c.kind.name(), c.severity, &stats));
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub variant: Variant,
    pub config: TrainConfig,
    /// Serialised run configuration; hashed into the report.
    pub run_config: String,
    /// Also evaluate the primary path on every corruption.
    pub corruption_sweep: bool,
    pub options: TrainOptions,
}

/// Trains one variant from warmed-up parameters and evaluates it.
pub fn run_experiment(
    warm: &ModelParams,
    exp: &Experiment,
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<(ModelParams, MetricsReport)> {
    check_vocab(warm, train_data, "training set")?;
    check_vocab(warm, val_data, "validation set")?;
    let train_set = embed_dataset(warm, train_data, None)?;
    let val_set = embed_dataset(warm, val_data, None)?;
    run_embedded(warm, exp, &train_set, &val_set, Some(val_data))
}

/// As [`run_experiment`] with the datasets already encoded. The corruption
/// sweep needs the raw validation images.
pub fn run_embedded(
    warm: &ModelParams,
    exp: &Experiment,
    train_set: &EmbeddedSet,
    val_set: &EmbeddedSet,
    val_data: Option<&Dataset>,
) -> Result<(ModelParams, MetricsReport)> {
    let mut params = warm.clone();
    let mut opts = exp.options.clone();
    opts.run_config = exp.run_config.clone();
    let run = match exp.variant {
        Variant::CaptionBaseline => train_caption_head(&mut params, &exp.config, train_set, val_set, &opts)?,
        _ => train_embedded(&mut params, &exp.config, train_set, val_set, &opts)?,
    };
    let validation = exp
        .variant
        .evaluated_paths()
        .into_iter()
        .map(|p| evaluate_embedded(&params, val_set, p))
        .collect::<Result<Vec<_>>>()?;
    let primary = exp.variant.primary_path();
    let method = exp.variant.method_label(primary);
    let rows = match (exp.corruption_sweep, val_data) {
        (true, Some(val)) => corruption_rows(&params, val, val_set, primary, &method)?,
        _ => {
            let s = validation.iter().find(|s| s.path == primary).expect("primary path evaluated");
            vec![ReportRow::from_stats(&method, "clean", 0, s)]
        }
    };
    let report = MetricsReport {
        method,
        seed: exp.config.seed,
        config_hash: config_hash(&exp.run_config),
        version: version_string(),
        warmup_losses: Vec::new(),
        epochs: run.epochs,
        best_epoch: run.best_epoch,
        validation,
        rows,
    };
    Ok((params, report))
}
