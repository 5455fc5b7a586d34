use std::path::{Path, PathBuf};

use langneck_core::data::{
    class_name, generate_dataset, load_dataset, render_scene_sized, save_dataset, Dataset, SceneSpec, Size, Split,
    Vocabulary,
};
use langneck_core::model::{
    classify_tokens, forward_soft_from_embeddings, greedy_caption, load_checkpoint, sample_no_repetition,
    save_checkpoint, encode_image, ModelConfig, ModelParams,
};
use langneck_core::objectives::{pipeline_grad_check, LossWeights};
use langneck_core::train::{
    corruption_rows, embed_dataset, emit_report, run_experiment, version_string, warmup_pretrain, DecodePath,
    Experiment, MetricsReport, TrainOptions, CAPTION_MAX_WORDS,
};
use langneck_core::{Error, Tensor};

use crate::config::RunConfig;

const TRAIN_FILE: &str = "train.lbds";
const VAL_FILE: &str = "val.lbds";
const VOCAB_FILE: &str = "vocab.lbvc";

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Argument(format!("cannot create directory {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Argument(format!("cannot write {}: {e}", path.display())))
}

/// Config text with its hash as a leading comment.
fn manifest(cfg: &RunConfig) -> String {
    format!("# config_hash={} version={}\n{}", cfg.hash(), version_string(), cfg.to_text())
}

fn data_dir(cfg: &RunConfig) -> Result<&Path, Error> {
    cfg.data.as_deref().ok_or_else(|| Error::Argument("no dataset directory given (--data)".into()))
}

fn load_file<T>(path: PathBuf, load: impl Fn(&Path) -> Result<T, Error>) -> Result<T, Error> {
    if !path.exists() {
        return Err(Error::Argument(format!("{} does not exist", path.display())));
    }
    load(&path)
}

struct Data {
    vocab: Vocabulary,
    train: Dataset,
    val: Dataset,
}

fn load_data(cfg: &RunConfig) -> Result<Data, Error> {
    let dir = data_dir(cfg)?;
    Ok(Data {
        vocab: load_file(dir.join(VOCAB_FILE), Vocabulary::load)?,
        train: load_file(dir.join(TRAIN_FILE), load_dataset)?,
        val: load_file(dir.join(VAL_FILE), load_dataset)?,
    })
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig, Error> {
    let m = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
    m.validate().map_err(|e| Error::Argument(e.to_string()))?;
    Ok(m)
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<(ModelParams, String), Error> {
    let ckpt = load_file(path.to_path_buf(), load_checkpoint)?;
    ckpt.expect_vocab(vocab.hash())?;
    Ok((ckpt.params, ckpt.run_config))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    if cfg.train_count == 0 || cfg.val_count == 0 {
        return Err(Error::Argument("--train and --val must be at least 1".into()));
    }
    create_dir(out)?;
    let vocab = Vocabulary::build();
    let train = generate_dataset(cfg.seed, cfg.train_count, Split::Train, &vocab)?;
    let val = generate_dataset(cfg.seed, cfg.val_count, Split::Val, &vocab)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    save_dataset(&out.join(TRAIN_FILE), &train)?;
    save_dataset(&out.join(VAL_FILE), &val)?;
    write_text(&out.join("manifest.txt"), &manifest(cfg))?;
    println!("wrote {} training and {} validation images to {}", train.len(), val.len(), out.display());
    Ok(())
}

fn warmed(cfg: &RunConfig, data: &Data) -> Result<(ModelParams, Vec<f64>), Error> {
    let mut params = ModelParams::init(&model_config(cfg, &data.vocab)?, data.vocab.hash(), cfg.seed)?;
    let losses = warmup_pretrain(&mut params, &data.train, &data.vocab, &cfg.train_config())?;
    for (e, l) in losses.iter().enumerate() {
        println!("warm-up epoch {}: caption loss {l:.4}", e + 1);
    }
    Ok((params, losses))
}

pub fn warmup(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let data = load_data(cfg)?;
    let (params, _) = warmed(cfg, &data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(out, &params, &manifest(cfg))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, init: Option<&Path>, out: &Path, sweep: bool) -> Result<(), Error> {
    let data = load_data(cfg)?;
    let (warm, warmup_losses) = match init {
        Some(path) => {
            let (p, _) = load_model(path, &data.vocab)?;
            if !p.is_backbone_frozen() {
                return Err(Error::Mismatch(format!("{} is not a warmed-up checkpoint", path.display())));
            }
            (p, Vec::new())
        }
        None => warmed(cfg, &data)?,
    };
    create_dir(out)?;
    let text = manifest(cfg);
    let exp = Experiment {
        variant: cfg.variant,
        config: cfg.train_config(),
        run_config: cfg.to_text(),
        corruption_sweep: sweep,
        options: TrainOptions { checkpoint_dir: Some(out.join("checkpoints")), run_config: text.clone() },
    };
    create_dir(&out.join("checkpoints"))?;
    let (params, mut report) = run_experiment(&warm, &exp, &data.train, &data.val)?;
    report.warmup_losses = warmup_losses;
    save_checkpoint(&out.join("model.lbck"), &params, &text)?;
    write_text(&out.join("manifest.txt"), &text)?;
    let (csv, _) = emit_report(&report, &out.join("report"))?;
    for e in &report.epochs {
        println!("epoch {}: loss {:.4} class {:.4} val {:.4}", e.epoch, e.total, e.class, e.val_accuracy);
    }
    for s in &report.validation {
        println!("{} accuracy {:.4}", cfg.variant.method_label(s.path), s.accuracy);
    }
    println!("wrote {}", csv.display());
    Ok(())
}

/// Method label for a checkpoint: its training variant when the embedded
/// configuration names one.
fn method_for(run_config: &str, path: DecodePath) -> String {
    let mut cfg = RunConfig::default();
    let variant = run_config
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "variant")
        .and_then(|(k, v)| cfg.set(k, v).ok().map(|()| cfg.variant));
    match variant {
        Some(v) => v.method_label(path),
        None => format!("checkpoint/{}", path.name()),
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), Error> {
    let data = load_data(cfg)?;
    let (params, run_config) = load_model(checkpoint, &data.vocab)?;
    let clean = embed_dataset(&params, &data.val, None)?;
    let method = method_for(&run_config, cfg.path);
    let rows = corruption_rows(&params, &data.val, &clean, cfg.path, &method)?;
    let validation = vec![langneck_core::train::evaluate_embedded(&params, &clean, cfg.path)?];
    let report = MetricsReport {
        method,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        version: version_string(),
        warmup_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        validation,
        rows,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let (csv, _) = emit_report(&report, out)?;
    for r in &report.rows {
        println!(
            "{} {} {} accuracy {:.4} duplicates {}",
            r.method, r.corruption, r.severity, r.accuracy, r.duplicate_violations
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
}

pub fn sample(cfg: &RunConfig, checkpoint: &Path) -> Result<(), Error> {
    let data = load_data(cfg)?;
    let (params, _) = load_model(checkpoint, &data.vocab)?;
    let count = cfg.count.min(data.val.len());
    let subset = Dataset { samples: data.val.samples[..count].to_vec(), ..data.val.clone() };
    let set = embed_dataset(&params, &subset, None)?;
    let emb = set.gather(&(0..count).collect::<Vec<_>>());
    let n = params.config().n_prompt;
    let (tokens, class_logits): (Vec<Vec<usize>>, Tensor) = match cfg.path {
        DecodePath::Soft | DecodePath::Hard => {
            let (out, soft_logits) = forward_soft_from_embeddings(&params, &emb)?;
            let logits = match cfg.path {
                DecodePath::Soft => soft_logits,
                _ => classify_tokens(&params, &out.hard_tokens)?,
            };
            (out.hard_tokens, logits)
        }
        DecodePath::NoRep => {
            let t = sample_no_repetition(&params, &emb, n)?;
            let l = classify_tokens(&params, &t)?;
            (t, l)
        }
        DecodePath::Caption => {
            let t = greedy_caption(&params, &emb, CAPTION_MAX_WORDS)?;
            let l = classify_tokens(&params, &t)?;
            (t, l)
        }
    };
    println!("# config_hash={} path={}", cfg.hash(), cfg.path.name());
    for (i, seq) in tokens.iter().enumerate() {
        let words: Vec<&str> = seq.iter().map(|&t| data.vocab.token(t)).collect();
        println!(
            "{i}\ttrue={}\tpred={}\twords: {}",
            class_name(subset.samples[i].label),
            class_name(argmax(class_logits.row(i))),
            words.join(" ")
        );
    }
    Ok(())
}

pub fn grad_check(cfg: &RunConfig, sabotage: bool) -> Result<(), Error> {
    let vocab = Vocabulary::with_words((0..12).map(|i| format!("w{i}")).collect())?;
    let model = ModelConfig::tiny();
    let params = ModelParams::init(&model, vocab.hash(), cfg.seed)?;
    let spec = SceneSpec::from_label((cfg.seed % 16) as usize, Size::Large, 1);
    let img = render_scene_sized(&spec, cfg.seed, model.image_size);
    let emb = encode_image(&params, &[&img])?;
    println!("h = {:e}", cfg.h);
    let mut worst: f64 = 0.0;
    for w in [LossWeights::PLAIN, LossWeights::new(0.1, 0.1)?, LossWeights::new(1.0, 1.0)?] {
        let r = pipeline_grad_check(&params, &emb, spec.label(), w, cfg.h, sabotage)?;
        println!(
            "lambda_sim {} lambda_llm {}: {} coordinates, max relative error {:.3e} at {}[{}]",
            w.lambda_sim, w.lambda_llm, r.coordinates, r.max_rel_error, r.worst_param, r.worst_index
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst < 1e-4 {
        println!("PASS max relative error {worst:.3e}");
        Ok(())
    } else {
        println!("FAIL max relative error {worst:.3e}");
        Err(Error::Numerical(format!("gradient check failed: max relative error {worst:.3e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_comes_from_the_embedded_variant() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "llm_loss").unwrap();
        assert_eq!(method_for(&manifest(&cfg), DecodePath::Hard), "llm_loss");
        assert_eq!(method_for(&manifest(&cfg), DecodePath::NoRep), "llm_loss/no_rep");
        assert_eq!(method_for("", DecodePath::Soft), "checkpoint/soft");
    }
}
