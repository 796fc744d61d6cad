use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sgqa_core::analysis::{
    hop_distribution_stats, hop_stats_csv, rank_tokens_global, render_heatmap_text, trace_to_records,
    GateRecord,
};
use sgqa_core::autodiff::{grad_check, RngState, Tape};
use sgqa_core::gate::Combiner;
use sgqa_core::metrics::TaskKind;
use sgqa_core::models::{ModelConfig, QaModel, RunMode};
use sgqa_core::text::{
    cloze_record, gen_synthetic_cloze, gen_synthetic_span, load_cloze_dataset, load_embeddings,
    load_span_dataset, span_dataset_to_json, ClozeSynthConfig, QaExample, SpanExample, SpanSynthConfig,
    Vocabulary,
};
use sgqa_core::train::{evaluate, prediction_text, Checkpoint, Trainer, EPOCH_LOG_HEADER};

use crate::config::{resolve_data_path, RunConfig};
use crate::{
    AnalyzeArgs, Cli, Command, EvalArgs, GenDataArgs, GradCheckArgs, GradCheckFailure, ModelArgs,
    TrainArgs, UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    match cli.command {
        Command::Train(args) => train(cfg, args),
        Command::Eval(args) => eval(cfg, args),
        Command::Analyze(args) => analyze(cfg, args),
        Command::GenData(args) => gen_data(cfg, args),
        Command::GradCheck(args) => grad_check_cmd(cfg, args),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(task: TaskKind, path: &Path) -> Result<Vec<QaExample>> {
    let path = resolve_data_path(path);
    if !path.is_file() {
        return Err(UsageError(format!("data file {} not found", path.display())).into());
    }
    let examples: Vec<QaExample> = match task {
        TaskKind::Span => load_span_dataset(&path)?.0.into_iter().map(QaExample::Span).collect(),
        TaskKind::Cloze => load_cloze_dataset(&path)?.0.into_iter().map(QaExample::Cloze).collect(),
    };
    if examples.is_empty() {
        return Err(UsageError(format!("no usable {task:?} examples in {}", path.display())).into());
    }
    Ok(examples)
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("no {what} given (flag or [data] in the config)")).into())
}

fn apply_model_args(model: &mut ModelConfig, args: &ModelArgs) {
    if let Some(t) = args.task {
        model.task = t.into();
    }
    if let Some(h) = args.hidden {
        model.hidden = h;
    }
    if let Some(e) = args.embed_dim {
        model.embed_dim = e;
    }
    if let Some(k) = args.hops {
        model.hops = k;
    }
    if let Some(e) = args.encoder {
        model.encoder = e.into();
    }
    if let Some(c) = args.combiner {
        model.combiner = c.into();
    }
    if args.no_matching {
        model.matching = false;
    }
}

/// The checkpoint's model, refusing a config that describes another one.
fn checkpoint_model(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, QaModel)> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(model) = &cfg.model {
        if *model != ckpt.model_config {
            return Err(UsageError(format!(
                "config [model] does not match checkpoint {}: {:?} vs {:?}",
                path.display(),
                model,
                ckpt.model_config
            ))
            .into());
        }
    }
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn build_model(cfg: &RunConfig, model_cfg: ModelConfig, data: &[QaExample]) -> Result<QaModel> {
    let seed = cfg.seed();
    match &cfg.data.embeddings {
        None => Ok(QaModel::for_dataset(model_cfg, data, seed)?),
        Some(path) => {
            let vocab = Vocabulary::from_tokens(data.iter().flat_map(|ex| {
                ex.passage()
                    .flat_tokens()
                    .iter()
                    .chain(ex.question().tokens())
                    .map(String::as_str)
            }));
            let emb = load_embeddings(&resolve_data_path(path), &vocab, model_cfg.embed_dim, cfg.data.oov, seed)?;
            Ok(QaModel::new(model_cfg, vocab, emb.matrix, seed)?)
        }
    }
}

fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if args.train_data.is_some() {
        cfg.data.train = args.train_data;
    }
    if args.eval_data.is_some() {
        cfg.data.eval = args.eval_data;
    }
    if args.embeddings.is_some() {
        cfg.data.embeddings = args.embeddings;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.checkpoint_every = n;
    }

    let resumed = match &args.resume {
        Some(path) => Some(checkpoint_model(&cfg, path)?.0),
        None => None,
    };
    let mut model_cfg = match (&resumed, &cfg.model) {
        (Some(c), _) => c.model_config.clone(),
        (None, Some(m)) => m.clone(),
        (None, None) => ModelConfig::default(),
    };
    let before = model_cfg.clone();
    apply_model_args(&mut model_cfg, &args.model);
    if resumed.is_some() && model_cfg != before {
        return Err(UsageError("model flags cannot change a resumed checkpoint's model".into()).into());
    }
    model_cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    let mut train_cfg = match (&resumed, &cfg.train) {
        (_, Some(t)) => t.clone(),
        (Some(c), None) => c.train_config.clone(),
        (None, None) => Default::default(),
    };
    if let Some(seed) = cfg.seed {
        train_cfg.seed = seed;
    }
    cfg.seed = Some(train_cfg.seed);
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = args.decay {
        train_cfg.decay = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if args.dropout.is_some() {
        train_cfg.dropout = args.dropout;
    }
    if args.clip.is_some() {
        train_cfg.clip = args.clip;
    }
    if let Some(v) = args.train_sample {
        train_cfg.train_sample = v;
    }
    train_cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    cfg.model = Some(model_cfg.clone());
    cfg.train = Some(train_cfg.clone());

    let train_path = required(cfg.data.train.clone(), "training data")?;
    let data = load_dataset(model_cfg.task, &train_path)?;
    let eval_data = match &cfg.data.eval {
        Some(p) => Some(load_dataset(model_cfg.task, p)?),
        None => None,
    };

    let mut trainer = match resumed {
        Some(mut ckpt) => {
            ckpt.train_config = train_cfg.clone();
            let mut t = ckpt.into_trainer()?;
            t.optimizer.lr = train_cfg.lr;
            t
        }
        None => Trainer::new(build_model(&cfg, model_cfg, &data)?, train_cfg.clone())?,
    };

    cfg.write_resolved()?;
    let out = cfg.out_dir();
    let mut log = String::from(EPOCH_LOG_HEADER);
    while trainer.epoch < train_cfg.epochs {
        let report = trainer.train_epoch(&data)?;
        let scored = match &eval_data {
            Some(d) => {
                let r = evaluate(&trainer.model, d, false)?.report;
                Some((r.em, r.f1))
            }
            None => None,
        };
        log.push_str(&report.log_row(scored));
        write(&out.join("metrics.csv"), &log)?;
        if cfg.checkpoint_every > 0 && report.epoch.is_multiple_of(cfg.checkpoint_every) {
            let dir = out.join("checkpoints");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            trainer
                .checkpoint()
                .save(&dir.join(format!("epoch-{:03}.ckpt", report.epoch)))?;
        }
        println!(
            "epoch {} loss {:.6} train {}",
            report.epoch,
            report.mean_loss,
            report.train_metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    write(&out.join("metrics.csv"), &log)?;
    trainer.checkpoint().save(&out.join("model.ckpt"))?;
    Ok(())
}

fn eval(mut cfg: RunConfig, args: EvalArgs) -> Result<()> {
    if args.data.is_some() {
        cfg.data.eval = args.data;
    }
    if args.buckets.is_some() {
        cfg.eval.buckets = args.buckets;
    }
    let (ckpt, model) = checkpoint_model(&cfg, &args.checkpoint)?;
    cfg.model = Some(ckpt.model_config.clone());
    let path = required(cfg.data.eval.clone(), "evaluation data")?;
    let data = load_dataset(model.task(), &path)?;
    let result = evaluate(&model, &data, false)?;
    let mut report = result.report.clone();
    if let Some(k) = cfg.eval.buckets {
        if k == 0 {
            return Err(UsageError("--buckets needs at least one bucket".into()).into());
        }
        report = report.with_buckets(&result.scores, k);
    }
    cfg.write_resolved()?;
    let out = cfg.out_dir();
    write(&out.join("eval.csv"), &report.to_csv())?;
    if cfg.eval.buckets.is_some() {
        write(&out.join("buckets.csv"), &report.buckets_csv())?;
    }
    let mut preds = String::from("id\tprediction\tcorrect\n");
    for ((ex, p), s) in data.iter().zip(&result.predictions).zip(&result.scores) {
        let _ = writeln!(preds, "{}\t{}\t{}", ex.id(), prediction_text(ex, p), s.em);
    }
    write(&out.join("predictions.tsv"), &preds)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn analyze(mut cfg: RunConfig, args: AnalyzeArgs) -> Result<()> {
    if args.data.is_some() {
        cfg.data.eval = args.data;
    }
    if let Some(n) = args.sample {
        cfg.analyze.sample = n;
    }
    if let Some(n) = args.min_count {
        cfg.analyze.min_count = n;
    }
    let (ckpt, model) = checkpoint_model(&cfg, &args.checkpoint)?;
    if model.config.combiner == Combiner::Concatenation {
        return Err(UsageError("a concatenation model has no gate values to trace".into()).into());
    }
    cfg.model = Some(ckpt.model_config.clone());
    let path = required(cfg.data.eval.clone(), "data to analyze")?;
    let data = load_dataset(model.task(), &path)?;
    let result = evaluate(&model, &data, true)?;

    let mut records: Vec<GateRecord> = Vec::new();
    let mut per_example = Vec::with_capacity(data.len());
    for (ex, trace) in data.iter().zip(&result.traces) {
        let trace = trace
            .as_ref()
            .with_context(|| format!("no gate trace for example {}", ex.id()))?;
        let recs = trace_to_records(ex.id(), trace, ex.passage())?;
        per_example.push(trace.num_hops());
        records.extend(recs);
    }

    cfg.write_resolved()?;
    let out = cfg.out_dir();
    let mut values = String::from("token,value,hop,example_id\n");
    let mut hops_seen = 0;
    for (ex, &hops) in data.iter().zip(&per_example) {
        for hop in 1..=hops {
            let h = render_heatmap_text(&records, ex.passage(), ex.id(), hop)?;
            values.extend(h.csv.lines().skip(1).map(|l| format!("{l}\n")));
        }
        hops_seen = hops_seen.max(hops);
    }
    write(&out.join("gate_values.csv"), &values)?;
    let ranking = rank_tokens_global(&records, cfg.analyze.min_count)?;
    write(&out.join("token_ranking.csv"), &ranking.to_csv()?)?;
    write(&out.join("hop_stats.csv"), &hop_stats_csv(&hop_distribution_stats(&records)))?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    RngState::new(cfg.seed()).shuffle(&mut order);
    let mut chosen: Vec<usize> = order.into_iter().take(cfg.analyze.sample).collect();
    chosen.sort_unstable();
    let dir = out.join("heatmaps");
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    for i in chosen {
        let ex = &data[i];
        let mut text = format!("example {}\n", ex.id());
        for hop in 1..=per_example[i] {
            let h = render_heatmap_text(&records, ex.passage(), ex.id(), hop)?;
            let _ = writeln!(text, "hop {hop}");
            for line in h.lines {
                let _ = writeln!(text, "{line}");
            }
        }
        write(&dir.join(format!("{:04}-{}.txt", i, file_stem(ex.id()))), &text)?;
    }
    println!(
        "traced {} examples over {} hops, {} ranked tokens",
        data.len(),
        hops_seen,
        ranking.ranked.len()
    );
    Ok(())
}

fn gen_data(mut cfg: RunConfig, args: GenDataArgs) -> Result<()> {
    let g = &mut cfg.gen_data;
    if let Some(t) = args.task {
        g.task = t.into();
    }
    if let Some(n) = args.n {
        g.n = n;
    }
    if let Some(v) = args.vocab_size {
        g.vocab_size = v;
    }
    if let Some(s) = args.sentences {
        g.sentences = s;
    }
    if let Some(c) = args.candidates {
        g.candidates = c;
    }
    let g = cfg.gen_data.clone();
    let seed = cfg.seed();
    cfg.seed = Some(seed);
    let bad = |e: sgqa_core::Error| UsageError(e.to_string());
    let (name, text) = match g.task {
        TaskKind::Span => {
            let examples: Vec<SpanExample> = gen_synthetic_span(&SpanSynthConfig {
                n_examples: g.n,
                vocab_size: g.vocab_size,
                n_sentences: g.sentences,
                sent_len_range: (g.min_sentence_len, g.max_sentence_len),
                seed,
            })
            .map_err(bad)?;
            ("span.json", span_dataset_to_json(&examples)?)
        }
        TaskKind::Cloze => {
            let examples = gen_synthetic_cloze(&ClozeSynthConfig {
                n_examples: g.n,
                vocab_size: g.vocab_size,
                n_candidates: g.candidates,
                n_sentences: g.sentences,
                sent_len_range: (g.min_sentence_len, g.max_sentence_len),
                seed,
            })
            .map_err(bad)?;
            let mut text = String::new();
            for ex in &examples {
                text.push_str(&cloze_record(ex));
                text.push('\n');
            }
            ("cloze.tsv", text)
        }
    };
    cfg.write_resolved()?;
    let path = cfg.out_dir().join(name);
    write(&path, &text)?;
    println!("wrote {} examples to {}", g.n, path.display());
    Ok(())
}

/// One small example and its model for each task under test.
fn grad_check_cases(cfg: &RunConfig) -> Result<Vec<(TaskKind, QaModel, QaExample)>> {
    let g = &cfg.grad_check;
    let seed = cfg.seed();
    let tasks = match g.task {
        Some(t) => vec![t],
        None => vec![TaskKind::Span, TaskKind::Cloze],
    };
    let mut cases = Vec::new();
    for task in tasks {
        let model_cfg = ModelConfig {
            task,
            hidden: g.hidden,
            embed_dim: g.embed_dim,
            hops: g.hops,
            ..cfg.model.clone().unwrap_or_default()
        };
        model_cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        let (model, ex) = QaModel::grad_check_toy(model_cfg, seed)?;
        cases.push((task, model, ex));
    }
    Ok(cases)
}

fn grad_check_cmd(mut cfg: RunConfig, args: GradCheckArgs) -> Result<()> {
    let g = &mut cfg.grad_check;
    if let Some(t) = args.task {
        g.task = Some(t.into());
    }
    if let Some(h) = args.hidden {
        g.hidden = h;
    }
    if let Some(e) = args.eps {
        g.eps = e;
    }
    if let Some(t) = args.threshold {
        g.threshold = t;
    }
    if !(cfg.grad_check.eps > 0.0) {
        bail!(UsageError("eps must be positive".into()));
    }
    cfg.seed = Some(cfg.seed());
    let cases = grad_check_cases(&cfg)?;
    cfg.write_resolved()?;

    let threshold = cfg.grad_check.threshold;
    let mut csv = String::from("task,group,coordinates,max_relative_error,max_abs_error\n");
    let mut failing = Vec::new();
    for (task, mut model, ex) in cases {
        let snapshot = model.clone();
        let params = model.params();
        let report = grad_check(&mut model.store, &params, cfg.grad_check.eps, |t: &mut Tape<'_>| {
            Ok(snapshot.forward(t, &ex, &mut RunMode::eval(false))?.loss)
        })?;
        let task_name = format!("{task:?}").to_lowercase();
        for group in &report.groups {
            let _ = writeln!(
                csv,
                "{task_name},{},{},{:e},{:e}",
                group.name,
                group.coordinates,
                group.max_relative_error,
                group.max_abs_error()
            );
            println!("{task_name} {:<24} {:.3e}", group.name, group.max_relative_error);
        }
        failing.extend(report.failing(threshold).iter().map(|g| format!("{task_name}:{}", g.name)));
    }
    write(&cfg.out_dir().join("grad_check.csv"), &csv)?;
    if !failing.is_empty() {
        return Err(GradCheckFailure(failing).into());
    }
    Ok(())
}
