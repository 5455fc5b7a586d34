//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Takes a few minutes on one core.

use std::f64::consts::LN_2;
use std::time::{Duration, Instant};

use langneck_core::data::{
    apply_corruption, generate_dataset, load_dataset, render_scene, save_dataset, Corruption, CorruptionKind, Dataset,
    SceneSpec, Size, Split, Vocabulary, NUM_CLASSES, NUM_SPECIAL,
};
use langneck_core::model::{
    checkpoint_bytes, classify, encode_image, hard_decode, load_checkpoint, sample_no_repetition, save_checkpoint,
    soft_bottleneck, ModelConfig, ModelParams, ParamGroup,
};
use langneck_core::objectives::{pipeline_grad_check, total_loss, LossWeights};
use langneck_core::tensor::grad_check;
use langneck_core::train::{
    embed_dataset, run_embedded, run_experiment, warmup_pretrain, DecodePath, EmbeddedSet, Experiment, MetricsReport,
    TrainConfig, TrainOptions, Variant,
};
use langneck_core::{Error, Tape, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_COUNT: usize = 2048;
const VAL_COUNT: usize = 512;
const LAMBDA: f64 = 0.1;

struct Verdict {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, title: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, title, pass, detail }
}

fn experiment(variant: Variant, seed: u64, sweep: bool) -> Experiment {
    let config = TrainConfig { seed, weights: variant.weights(LAMBDA, LAMBDA), ..TrainConfig::default() };
    Experiment {
        variant,
        run_config: format!("{config:?}"),
        config,
        corruption_sweep: sweep,
        options: TrainOptions::default(),
    }
}

struct Trained {
    variant: Variant,
    params: ModelParams,
    report: MetricsReport,
}

struct SeedRun {
    seed: u64,
    warm: ModelParams,
    val_set: EmbeddedSet,
    runs: Vec<Trained>,
    /// Data generation, warm-up, plain and caption-baseline training.
    default_pipeline: Duration,
}

impl SeedRun {
    fn report(&self, v: Variant) -> &MetricsReport {
        &self.runs.iter().find(|t| t.variant == v).expect("variant trained").report
    }

    fn stat(&self, v: Variant, path: DecodePath) -> &langneck_core::train::EvalStats {
        self.report(v).path_stats(path).expect("path evaluated")
    }
}

fn run_seed(seed: u64, vocab: &Vocabulary) -> Result<SeedRun, Error> {
    let t0 = Instant::now();
    let train = generate_dataset(seed, TRAIN_COUNT, Split::Train, vocab)?;
    let val = generate_dataset(seed, VAL_COUNT, Split::Val, vocab)?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let mut warm = ModelParams::init(&ModelConfig::default(), vocab.hash(), seed)?;
    let losses = warmup_pretrain(&mut warm, &train, vocab, &cfg)?;
    eprintln!("  seed {seed}: warm-up losses {losses:.3?} ({:.0?})", t0.elapsed());
    let train_set = embed_dataset(&warm, &train, None)?;
    let val_set = embed_dataset(&warm, &val, None)?;
    let mut runs = Vec::new();
    let mut default_pipeline = Duration::ZERO;
    for variant in [Variant::Plain, Variant::CaptionBaseline, Variant::TokenSim, Variant::LlmLoss] {
        // the corruption sweep is only needed once
        let sweep = seed == SEEDS[0] && variant == Variant::Plain;
        let exp = experiment(variant, seed, sweep);
        let (params, report) = run_embedded(&warm, &exp, &train_set, &val_set, Some(&val))?;
        for s in &report.validation {
            eprintln!(
                "  seed {seed} {:<16} {:<8} acc {:.3} cos {:?} nll {:?} distinct {:.2}",
                variant.name(),
                s.path.name(),
                s.accuracy,
                s.mean_cosine.map(|c| (c * 1e3).round() / 1e3),
                s.llm_nll.map(|c| (c * 1e3).round() / 1e3),
                s.mean_distinct_tokens
            );
        }
        runs.push(Trained { variant, params, report });
        if variant == Variant::CaptionBaseline {
            default_pipeline = t0.elapsed();
        }
    }
    Ok(SeedRun { seed, warm, val_set, runs, default_pipeline })
}

fn criterion_1() -> Result<Verdict, Error> {
    let t0 = Instant::now();
    let vocab = Vocabulary::with_words((0..12).map(|i| format!("w{i}")).collect())?;
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, vocab.hash(), 11)?;
    let spec = SceneSpec::from_label(5, Size::Large, 2);
    let img = langneck_core::data::render_scene_sized(&spec, 3, cfg.image_size);
    let emb = encode_image(&params, &[&img])?;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for w in [LossWeights::PLAIN, LossWeights::new(0.1, 0.1)?, LossWeights::new(1.0, 1.0)?] {
        let r = pipeline_grad_check(&params, &emb, spec.label(), w, 1e-4, false)?;
        worst = worst.max(r.max_rel_error);
        coords += r.coordinates;
    }
    let sabotaged = pipeline_grad_check(&params, &emb, spec.label(), LossWeights::new(0.1, 0.1)?, 1e-4, true)?;
    let elapsed = t0.elapsed();
    let pass = worst < 1e-4 && sabotaged.max_rel_error > 1e-4 && elapsed < Duration::from_secs(60);
    Ok(verdict(
        1,
        "full-pipeline gradient check",
        pass,
        format!(
            "max rel error {worst:.2e} over {coords} coordinates, sabotaged backward {:.2e}, {:.1?}",
            sabotaged.max_rel_error, elapsed
        ),
    ))
}

fn criterion_2(runs: &[SeedRun]) -> Verdict {
    let r = &runs[0];
    let soft = r.stat(Variant::Plain, DecodePath::Soft).accuracy;
    let hard = r.stat(Variant::Plain, DecodePath::Hard).accuracy;
    let caption = r.stat(Variant::CaptionBaseline, DecodePath::Caption).accuracy;
    let t = r.default_pipeline;
    let pass = soft >= 0.90 && hard >= 0.75 && caption < hard && t < Duration::from_secs(15 * 60);
    verdict(
        2,
        "learning signal",
        pass,
        format!("seed {}: soft {soft:.3}, hard {hard:.3}, caption baseline {caption:.3}, {:.0?}", r.seed, t),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_3(runs: &[SeedRun]) -> Verdict {
    let cos = |v| mean(runs.iter().map(|r| r.stat(v, DecodePath::Soft).mean_cosine.unwrap()));
    let distinct = |v| mean(runs.iter().map(|r| r.stat(v, DecodePath::Hard).mean_distinct_tokens));
    let gaps: Vec<f64> = runs
        .iter()
        .map(|r| r.stat(Variant::TokenSim, DecodePath::Hard).accuracy - r.stat(Variant::Plain, DecodePath::Hard).accuracy)
        .collect();
    let (c0, c1) = (cos(Variant::Plain), cos(Variant::TokenSim));
    let (d0, d1) = (distinct(Variant::Plain), distinct(Variant::TokenSim));
    let pass = c1 < c0 && gaps.iter().all(|g| g.abs() <= 0.05) && d1 >= d0;
    verdict(
        3,
        "token-similarity effect",
        pass,
        format!("cosine {c1:.4} vs plain {c0:.4}, hard-accuracy gaps {gaps:+.3?}, distinct tokens {d1:.3} vs {d0:.3}"),
    )
}

fn criterion_4(runs: &[SeedRun]) -> Verdict {
    let nll = |v| mean(runs.iter().map(|r| r.stat(v, DecodePath::Hard).llm_nll.unwrap()));
    let (n0, n1) = (nll(Variant::Plain), nll(Variant::LlmLoss));
    verdict(4, "llm-loss effect", n1 < n0, format!("llm NLL {n1:.4} vs plain {n0:.4}"))
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let rows = &runs[0].report(Variant::Plain).rows;
    let clean = rows.iter().find(|r| r.corruption == "clean").expect("clean row").accuracy;
    let mut pass = rows.len() == 21;
    let mut parts = Vec::new();
    for kind in CorruptionKind::ALL {
        let mut seq = vec![clean];
        seq.extend(rows.iter().filter(|r| r.corruption == kind.name()).map(|r| r.accuracy));
        let monotone = seq.windows(2).all(|w| w[1] <= w[0] + 0.02);
        pass &= seq.len() == 6 && seq[5] < clean && monotone;
        parts.push(format!("{} {:.3?}", kind.name(), seq));
    }
    verdict(5, "corruption degradation", pass, parts.join("; "))
}

fn criterion_6(runs: &[SeedRun], vocab: &Vocabulary) -> Result<Verdict, Error> {
    let val = generate_dataset(99, VAL_COUNT, Split::Val, vocab)?;
    let mut sets: Vec<(ModelParams, EmbeddedSet)> = Vec::new();
    for seed in 100..108 {
        let p = ModelParams::init(&ModelConfig::default(), vocab.hash(), seed)?;
        let s = embed_dataset(&p, &val, None)?;
        sets.push((p, s));
    }
    let mut sequences = 0;
    let mut bad = 0;
    let mut check = |params: &ModelParams, set: &EmbeddedSet| -> Result<(), Error> {
        let n = params.config().n_prompt;
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(128) {
            for seq in sample_no_repetition(params, &set.gather(chunk), n)? {
                let mut s = seq.clone();
                s.sort_unstable();
                s.dedup();
                sequences += 1;
                if s.len() != n || seq.len() != n || seq.iter().any(|&t| t < NUM_SPECIAL) {
                    bad += 1;
                }
            }
        }
        Ok(())
    };
    for (p, s) in &sets {
        check(p, s)?;
    }
    for r in runs {
        check(&r.warm, &r.val_set)?;
        for t in &r.runs {
            check(&t.params, &r.val_set)?;
        }
    }
    Ok(verdict(
        6,
        "no-repetition guarantee",
        sequences >= 10_000 && bad == 0,
        format!("{sequences} sequences, {bad} with a duplicate or special token"),
    ))
}

fn small_run(vocab: &Vocabulary, train: &Dataset, val: &Dataset) -> Result<(Vec<u8>, String, String), Error> {
    let cfg = TrainConfig { seed: 5, warmup_epochs: 1, epochs: 2, ..TrainConfig::default() };
    let mut p = ModelParams::init(&ModelConfig::default(), vocab.hash(), 5)?;
    warmup_pretrain(&mut p, train, vocab, &cfg)?;
    let mut exp = experiment(Variant::TokenSim, 5, true);
    exp.config.epochs = 2;
    let (q, report) = run_experiment(&p, &exp, train, val)?;
    Ok((checkpoint_bytes(&q, &exp.run_config), report.to_csv(), report.to_json()))
}

fn criterion_7(runs: &[SeedRun], vocab: &Vocabulary) -> Result<Verdict, Error> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut failures = Vec::new();

    let a = generate_dataset(7, 96, Split::Train, vocab)?;
    let b = generate_dataset(7, 96, Split::Train, vocab)?;
    if a.to_bytes() != b.to_bytes() {
        failures.push("dataset regeneration differs".to_owned());
    }
    let path = dir.path().join("train.lbds");
    save_dataset(&path, &a)?;
    let back = load_dataset(&path)?;
    if back != a || back.to_bytes() != a.to_bytes() {
        failures.push("dataset round trip differs".to_owned());
    }

    let val = generate_dataset(7, 48, Split::Val, vocab)?;
    let first = small_run(vocab, &a, &val)?;
    let second = small_run(vocab, &a, &val)?;
    if first.0 != second.0 {
        failures.push("checkpoints of identical runs differ".to_owned());
    }
    if first.1 != second.1 || first.2 != second.2 {
        failures.push("reports of identical runs differ".to_owned());
    }

    let mut blobs = 0;
    for r in runs {
        let ckpt = dir.path().join(format!("seed{}.lbck", r.seed));
        save_checkpoint(&ckpt, &r.warm, "warm")?;
        let loaded = load_checkpoint(&ckpt)?;
        if checkpoint_bytes(&loaded.params, &loaded.run_config) != checkpoint_bytes(&r.warm, "warm")
            || std::fs::read(&ckpt).ok() != Some(checkpoint_bytes(&r.warm, "warm"))
        {
            failures.push(format!("seed {} checkpoint round trip differs", r.seed));
        }
        let frozen = r.warm.group_bytes(ParamGroup::Backbone);
        for t in &r.runs {
            blobs += 1;
            if t.params.group_bytes(ParamGroup::Backbone) != frozen {
                failures.push(format!("seed {} {} changed the frozen backbone", r.seed, t.variant.name()));
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("datasets, checkpoints and reports reproducible; {blobs} frozen backbones unchanged")
    } else {
        failures.join("; ")
    };
    Ok(verdict(7, "determinism and round trips", failures.is_empty(), detail))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn criterion_8(vocab: &Vocabulary) -> Result<Verdict, Error> {
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failed.push(name);
        }
    };
    let t = |rows: &[&[f64]]| Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();

    let mut tape = Tape::new();
    let bm = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let (i3, b) = (tape.constant(Tensor::eye(3)), tape.constant(bm.clone()));
    let y = tape.matmul(i3, b)?;
    check("identity matmul", tape.value(y) == &bm);
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let a = tape.constant(t(&[&[1.0, -2.0], &[3.5, 4.0]]));
    let y = tape.matmul(a, z)?;
    check("zero matmul", tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(t(&[&[2.5; 4]]));
    let s = tape.softmax(x)?;
    check("softmax symmetry", close(tape.value(s).data(), &[0.25; 4], 1e-15));
    let x = tape.constant(t(&[&[0.0, LN_2]]));
    let s = tape.softmax(x)?;
    check("softmax exp-normalize", close(tape.value(s).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));
    let base = [0.3, -1.2, 4.0, 0.0, 2.2];
    let x = tape.constant(t(&[&base]));
    let shifted: Vec<f64> = base.iter().map(|v| v + 17.0).collect();
    let xs = tape.constant(t(&[&shifted]));
    let (s, ss) = (tape.softmax(x)?, tape.softmax(xs)?);
    check("softmax shift invariance", close(tape.value(s).data(), tape.value(ss).data(), 1e-12));

    let u4 = tape.constant(Tensor::zeros(&[1, 4]));
    let ce = tape.cross_entropy(u4, &[2])?;
    check("uniform cross-entropy ln 4", (tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    let u16 = tape.constant(Tensor::zeros(&[3, NUM_CLASSES]));
    let ce = tape.cross_entropy(u16, &[0, 7, 15])?;
    check("uniform class loss ln 16", (tape.value(ce).item() - 16f64.ln()).abs() < 1e-12);
    let sat = tape.constant(t(&[&[0.0, 1e9, 0.0]]));
    let ce = tape.cross_entropy(sat, &[1])?;
    check("saturated cross-entropy", tape.value(ce).item().abs() < 1e-6);

    let pairs: [(&[f64], &[f64], f64); 3] = [
        (&[0.3, -0.7, 2.0], &[0.3, -0.7, 2.0], 1.0),
        (&[1.0, 0.0], &[0.0, 1.0], 0.0),
        (&[1.0, 0.0], &[0.5f64.sqrt(), 0.5f64.sqrt()], 0.5f64.sqrt()),
    ];
    for (u, v, want) in pairs {
        let (u, v) = (tape.constant(t(&[u])), tape.constant(t(&[v])));
        let c = tape.cosine_similarity(u, v)?;
        let got = tape.value(c).item();
        check("cosine identities", (got - want).abs() < 1e-6 && (-1.0..=1.0).contains(&got));
    }
    let same = tape.constant(t(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]));
    let c = tape.mean_pairwise_cosine(same, 3)?;
    check("identical tokens similarity 1", (tape.value(c).item() - 1.0).abs() < 1e-6);
    let orth = tape.constant(Tensor::eye(3));
    let c = tape.mean_pairwise_cosine(orth, 3)?;
    check("orthogonal tokens similarity 0", tape.value(c).item().abs() < 1e-12);

    let constant = tape.constant(t(&[&[3.0; 5]]));
    let (gain, bias) = (tape.constant(Tensor::full(&[5], 1.0)), tape.constant(Tensor::zeros(&[5])));
    let ln = tape.layer_norm(constant, gain, bias)?;
    check("layer norm of a constant row", tape.value(ln).data().iter().all(|&v| v == 0.0));
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    let gz = tape.gelu(zero)?;
    check("gelu(0)", tape.value(gz).item() == 0.0);

    let xv = t(&[&[0.5, -1.5, 2.0]]);
    let mut tape = Tape::new();
    let x = tape.param(xv.clone());
    let s = tape.sum(x)?;
    tape.backward(s)?;
    check("grad of sum", tape.grad(x).unwrap().data() == [1.0, 1.0, 1.0]);
    let mut tape = Tape::new();
    let x = tape.param(xv.clone());
    let sq = tape.mul(x, x)?;
    let s = tape.sum(sq)?;
    tape.backward(s)?;
    check("grad of x.x", tape.grad(x).unwrap().data() == [1.0, -3.0, 4.0]);
    let r = grad_check(|tape: &mut Tape, x| -> Result<_, Error> { Ok(tape.sum(x)?) }, &xv, 1e-4)?;
    check("finite differences of sum", r.max_rel_error < 1e-10);

    let mut tape = Tape::new();
    let cls = tape.constant(Tensor::scalar(1.0));
    let sim = tape.constant(Tensor::scalar(0.5));
    let llm = tape.constant(Tensor::scalar(0.25));
    let l = total_loss(&mut tape, cls, Some(sim), Some(llm), LossWeights::PLAIN)?;
    check("ablation identity w=(0,0)", tape.value(l).item() == 1.0);
    let l = total_loss(&mut tape, cls, Some(sim), None, LossWeights { lambda_sim: 1.0, lambda_llm: 0.0 })?;
    check("w=(1,0) arithmetic", tape.value(l).item() == 1.5);

    check("vocabulary bijection", (0..vocab.len()).all(|i| vocab.id(vocab.token(i)) == Some(i)));
    check("vocabulary determinism", Vocabulary::build() == *vocab);
    let spec = SceneSpec::from_label(9, Size::Small, 1);
    let img = render_scene(&spec, 4);
    check("render determinism", render_scene(&spec, 4) == img);
    check("pixel range", img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    let balanced = generate_dataset(3, 160, Split::Train, vocab)?;
    let mut counts = [0usize; NUM_CLASSES];
    balanced.labels().iter().for_each(|&l| counts[l] += 1);
    check("class balance", counts.iter().all(|&c| c == 10));
    for kind in CorruptionKind::ALL {
        let c = Corruption::new(kind, 0)?;
        check("severity 0 identity", apply_corruption(&img, c, 8)?.pixels == img.pixels);
    }
    let mut flat = img.clone();
    flat.pixels.iter_mut().for_each(|v| *v = 0.4);
    let blurred = apply_corruption(&flat, Corruption::new(CorruptionKind::DefocusBlur, 5)?, 1)?;
    check("blur of a constant image", blurred.pixels == flat.pixels);

    let mut row = vec![0.0; 12];
    row[5] = 2.0;
    row[9] = 2.0;
    check("argmax tie-break", hard_decode(&Tensor::new(vec![1, 12], row)?, &[0, 1, 2]) == vec![5]);
    check(
        "argmax under full masking",
        hard_decode(&Tensor::zeros(&[1, 6]), &[0, 1, 2]) == vec![3],
    );
    let e = t(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 4.0]]);
    let (soft, _) = soft_bottleneck(&t(&[&[0.0, 1e6, 0.0]]), &e)?;
    check("one-hot soft word", close(soft.data(), &[3.0, -1.0], 1e-12));
    let (soft, _) = soft_bottleneck(&t(&[&[0.7, 0.7, 0.7]]), &e)?;
    check("uniform soft word", close(soft.data(), &[4.0 / 3.0, 5.0 / 3.0], 1e-12));

    let mut params = ModelParams::init(&ModelConfig::default(), vocab.hash(), 1)?;
    let d = params.config().d_model;
    params.by_name_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let pooled = Tensor::from_fn(&[1, d], |i| (i as f64).sin());
    let logits = classify(&params, &pooled)?;
    check("zero head gives the bias", logits.data() == params.head_bias().data());

    let n = failed.len();
    failed.dedup();
    Ok(verdict(
        8,
        "unit identities",
        n == 0,
        if n == 0 { "all identities hold".into() } else { format!("failed: {}", failed.join(", ")) },
    ))
}

fn main() {
    let vocab = Vocabulary::build();
    let mut verdicts = Vec::new();
    let run = |verdicts: &mut Vec<Verdict>, f: &dyn Fn() -> Result<Verdict, Error>, id: usize| match f() {
        Ok(v) => verdicts.push(v),
        Err(e) => verdicts.push(verdict(id, "error", false, e.to_string())),
    };
    eprintln!("criterion 1 ...");
    run(&mut verdicts, &criterion_1, 1);
    eprintln!("criterion 8 ...");
    run(&mut verdicts, &|| criterion_8(&vocab), 8);
    eprintln!("training {} seeds ...", SEEDS.len());
    let runs: Result<Vec<SeedRun>, Error> = SEEDS.iter().map(|&s| run_seed(s, &vocab)).collect();
    match runs {
        Ok(runs) => {
            verdicts.push(criterion_2(&runs));
            verdicts.push(criterion_3(&runs));
            verdicts.push(criterion_4(&runs));
            verdicts.push(criterion_5(&runs));
            eprintln!("criterion 6 ...");
            run(&mut verdicts, &|| criterion_6(&runs, &vocab), 6);
            eprintln!("criterion 7 ...");
            run(&mut verdicts, &|| criterion_7(&runs, &vocab), 7);
        }
        Err(e) => {
            for id in 2..=7 {
                verdicts.push(verdict(id, "training failed", false, e.to_string()));
            }
        }
    }
    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!("criterion {} {}: {} ({})", v.id, if v.pass { "PASS" } else { "FAIL" }, v.title, v.detail);
    }
    if verdicts.iter().any(|v| !v.pass) {
        std::process::exit(1);
    }
}
