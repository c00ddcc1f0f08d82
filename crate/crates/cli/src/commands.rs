//! Subcommands. Each reads its inputs from `out_dir` (or configured paths),
//! writes its artifacts there and records them in the run manifest.

use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use textdistill_core::filter::LabelCheckMode;
use textdistill_core::lm::data::{read_jsonl, write_jsonl};
use textdistill_core::lm::{Example, ModelParams, TokenSequence, Vocab};
use textdistill_core::metrics::{histogram, write_histogram_csv, write_metrics_csv, MetricRow};
use textdistill_core::theory::{run_suite, GradErrorRow};
use textdistill_core::{Error, SeedStream};

use crate::config::{self, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::pipeline::{self, Datasets, Encoded};

pub const VOCAB: &str = "vocab.txt";
pub const BASE: &str = "base.ckpt";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const CHECKER: &str = "checker.ckpt";
pub const POOL: &str = "pool.jsonl";
pub const ADMM_LOG: &str = "admm_log.csv";
pub const RHO_SCORES: &str = "rho_scores.csv";
pub const FILTER_REPORT: &str = "filter_report.json";
pub const SYNTHETIC: &str = "synthetic.jsonl";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const GRAD_ERROR: &str = "grad_error.csv";
pub const METRICS: &str = "metrics.csv";
pub const NEAREST_HIST: &str = "nearest_hist.csv";
pub const THEORY_REPORT: &str = "theory_report.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    ToyData,
    Pretrain,
    Distill,
    Finetune,
    Evaluate,
    Theory,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::ToyData => "toy-data",
            Command::Pretrain => "pretrain",
            Command::Distill => "distill",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Theory => "theory",
            Command::Report => "report",
        }
    }
}

/// Runs one command and returns the files it wrote.
pub fn run(cmd: Command, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = Writer::new(out);
    match cmd {
        Command::ToyData => cmd_toy_data(cfg, &mut w)?,
        Command::Pretrain => cmd_pretrain(cfg, &mut w)?,
        Command::Distill => cmd_distill(cfg, &mut w)?,
        Command::Finetune => cmd_finetune(cfg, &mut w)?,
        Command::Evaluate => cmd_evaluate(cfg, &mut w)?,
        Command::Theory => cmd_theory(cfg, &mut w)?,
        Command::Report => cmd_report(cfg, &mut w)?,
    }
    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record(cmd.name(), cfg, &w.written)?;
    manifest.save(out)?;
    Ok(w.written)
}

/// Tracks written files.
struct Writer {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, body: &str) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.text(name, &s)
    }
}

fn input(cfg: &RunConfig, name: &str) -> CliResult<PathBuf> {
    let p = cfg.paths.out_dir.join(name);
    if !p.exists() {
        return Err(Error::Data(format!(
            "missing input {} (run the earlier stage first)",
            p.display()
        ))
        .into());
    }
    Ok(p)
}

/// Datasets, the saved vocabulary and the encoded splits.
fn load_context(cfg: &RunConfig) -> CliResult<(Datasets, Vocab, Encoded)> {
    let ds = pipeline::datasets(cfg)?;
    let vocab = Vocab::load(&input(cfg, VOCAB)?, &pipeline::label_set(&ds))?;
    let enc = pipeline::encode_all(cfg, &ds, &vocab)?;
    Ok((ds, vocab, enc))
}

fn load_model(cfg: &RunConfig, name: &str, vocab: &Vocab) -> CliResult<ModelParams> {
    let m = ModelParams::load(&input(cfg, name)?)?;
    if m.config.vocab_size != vocab.len() {
        return Err(Error::Data(format!(
            "{name} has vocabulary size {} but {VOCAB} has {}",
            m.config.vocab_size,
            vocab.len()
        ))
        .into());
    }
    Ok(m)
}

fn series_csv(header: &str, rows: impl IntoIterator<Item = (usize, f64)>) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in rows {
        s.push_str(&format!("{a},{b}\n"));
    }
    s
}

fn cmd_toy_data(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let ds = pipeline::datasets(cfg)?;
    for (name, split) in [
        ("corpus.jsonl", &ds.corpus),
        ("train.jsonl", &ds.train),
        ("test.jsonl", &ds.test),
        ("holdout.jsonl", &ds.holdout),
        ("checker.jsonl", &ds.checker),
    ] {
        let p = w.path(name);
        write_jsonl(&p, split)?;
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let ds = pipeline::datasets(cfg)?;
    let vocab = pipeline::build_vocab(cfg, &ds)?;
    let enc = pipeline::encode_all(cfg, &ds, &vocab)?;
    let (base, losses) = pipeline::pretrain_stage(cfg, &vocab, &enc.corpus)?;
    let p = w.path(VOCAB);
    vocab.save(&p)?;
    let p = w.path(BASE);
    base.save(&p)?;
    w.text(
        PRETRAIN_LOSS,
        &series_csv("step,loss", losses.iter().copied().enumerate().map(|(i, l)| (i + 1, l))),
    )
}

fn cmd_distill(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let (_, vocab, enc) = load_context(cfg)?;
    let base = load_model(cfg, BASE, &vocab)?;
    let checker = match (cfg.filter.mode, &cfg.paths.checker) {
        (_, Some(p)) => Some(ModelParams::load(p)?),
        (LabelCheckMode::ExternalClassifier, None) => {
            let m = pipeline::train_checker(cfg, &base, &enc)?;
            let p = w.path(CHECKER);
            m.save(&p)?;
            Some(m)
        }
        _ => None,
    };
    let stage = pipeline::distill_stage(cfg, &base, &vocab, &enc.train, checker.as_ref())?;
    for t in &stage.targets {
        let name = match t.class {
            Some(c) => format!("target_{}.ckpt", vocab.labels()[c]),
            None => "target_all.ckpt".to_string(),
        };
        let p = w.path(&name);
        t.save(&p)?;
    }
    let records: Vec<_> = stage.output.pool.iter().map(|c| c.to_record(&vocab)).collect();
    let p = w.path(POOL);
    write_jsonl(&p, &records)?;

    let mut log = String::from("iter,candidate,f,primal_residual\n");
    for r in &stage.output.log {
        log.push_str(&format!("{},{},{},{}\n", r.iter, r.candidate, r.f, r.primal_residual));
    }
    w.text(ADMM_LOG, &log)?;
    let mut rho = String::from("rho,median_match_loss\n");
    for (r, m) in &stage.rho_scores {
        rho.push_str(&format!("{r},{m}\n"));
    }
    w.text(RHO_SCORES, &rho)?;
    w.json(
        FILTER_REPORT,
        &json!({ "config": config_echo(cfg), "rho": stage.rho, "filter": stage.filter.report }),
    )?;
    let synthetic: Vec<Example> = stage
        .synthetic
        .iter()
        .map(|s| Example::labelled(vocab.detokenize(&s.prompt), vocab.labels()[s.label.unwrap_or(0)].clone()))
        .collect();
    let p = w.path(SYNTHETIC);
    write_jsonl(&p, &synthetic)?;
    info!("kept {} of {} candidates", synthetic.len(), records.len());
    Ok(())
}

/// The set fine-tuning runs on: `paths.finetune_data` or the distilled set.
fn finetune_data(cfg: &RunConfig, vocab: &Vocab) -> CliResult<Vec<TokenSequence>> {
    let path = match &cfg.paths.finetune_data {
        Some(p) => p.clone(),
        None => input(cfg, SYNTHETIC)?,
    };
    let ex: Vec<Example> = read_jsonl(&path)?;
    if ex.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())).into());
    }
    let seqs = textdistill_core::lm::data::encode(&ex, vocab, cfg.model.n_max)?;
    if seqs.iter().any(|s| s.label.is_none()) {
        return Err(Error::Data("fine-tuning data must be labelled".into()).into());
    }
    Ok(seqs)
}

/// A random word set with the lengths and labels of `like`.
fn shaped_random_set(vocab: &Vocab, like: &[TokenSequence], seed: SeedStream) -> Vec<TokenSequence> {
    let mut rng = seed.rng();
    let pool = vocab.word_ids();
    like.iter()
        .map(|s| {
            let ids = textdistill_core::lm::model::random_ids(&mut rng, &pool, s.prompt.len());
            TokenSequence::new(ids, s.response.clone(), s.label)
        })
        .collect()
}

fn grad_error_csv(rows: &[GradErrorRow]) -> String {
    let mut s = String::from("step,set,last_layer,full\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.set, r.last_layer, r.full));
    }
    s
}

fn cmd_finetune(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let (_, vocab, enc) = load_context(cfg)?;
    let base = load_model(cfg, BASE, &vocab)?;
    let data = finetune_data(cfg, &vocab)?;
    let trace = pipeline::finetune_stage(cfg, &base, &data, "main")?;
    let random = shaped_random_set(&vocab, &data, SeedStream::new(cfg.seed).fork_str("random_set"));
    let random_trace = pipeline::finetune_stage(cfg, &base, &random, "random")?;
    let gerr = pipeline::grad_error_series(&enc.train, &data, &trace, &random, &random_trace)?;
    let acc = pipeline::accuracy_series(&trace, &enc.test, &vocab)?;
    let p = w.path(FINETUNED);
    trace.final_params().save(&p)?;
    let rows: Vec<MetricRow> = acc
        .iter()
        .map(|(s, a)| MetricRow::new("accuracy", &format!("test_step_{s}"), *a, cfg.seed))
        .chain(trace.losses.iter().enumerate().map(|(i, l)| {
            MetricRow::new("train_loss", &format!("step_{}", i + 1), *l, cfg.seed)
        }))
        .collect();
    let p = w.path(FINETUNE_METRICS);
    write_metrics_csv(&p, &rows)?;
    w.text(GRAD_ERROR, &grad_error_csv(&gerr))
}

fn cmd_evaluate(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let (_, vocab, enc) = load_context(cfg)?;
    let base = load_model(cfg, BASE, &vocab)?;
    let tuned = load_model(cfg, FINETUNED, &vocab)?;
    let data = finetune_data(cfg, &vocab)?;
    let eval = pipeline::evaluate(cfg, &base, &tuned, &vocab, &enc, &data)?;
    let p = w.path(METRICS);
    write_metrics_csv(&p, &pipeline::evaluation_rows(&eval, cfg.seed))?;
    let p = w.path(NEAREST_HIST);
    write_histogram_csv(&p, &histogram(&eval.nearest, 20))?;
    Ok(())
}

fn cmd_theory(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let suite = run_suite(
        cfg.theory.instances,
        cfg.theory.max_dim,
        SeedStream::new(cfg.seed).fork_str("theory"),
    )?;
    w.json(
        THEORY_REPORT,
        &json!({ "config": config_echo(cfg), "passed": suite.passed(), "suite": suite }),
    )?;
    if !suite.passed() {
        return Err(Error::NonFinite("theory suite reported violations".into()).into());
    }
    Ok(())
}

fn config_echo(cfg: &RunConfig) -> Value {
    Value::Object(
        cfg.entries()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect(),
    )
}

/// Parses a metrics CSV into `(metric, split, value)` rows.
fn read_metrics(path: &Path) -> CliResult<Vec<(String, String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CliError::Core(Error::Data(format!("bad metrics row {l:?}")));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((f[0].to_string(), f[1].to_string(), f[2].parse().map_err(|_| bad())?))
        })
        .collect()
}

fn read_grad_error(path: &Path) -> CliResult<Vec<GradErrorRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CliError::Core(Error::Data(format!("bad gradient-error row {l:?}")));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(GradErrorRow {
                step: f[0].parse().map_err(|_| bad())?,
                set: f[1].to_string(),
                last_layer: f[2].parse().map_err(|_| bad())?,
                full: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Conventions a reader needs to interpret the numbers in a report.
fn report_notes(cfg: &RunConfig) -> Vec<String> {
    vec![
        "ADMM uses the scaled form: the x step penalises (rho/2)||X - Z + L/rho||^2, \
         the z step projects X + L/rho, and the dual update is L += rho (X - Z)."
            .to_string(),
        format!(
            "Each class target is computed from a disjoint subset of the training data, so \
             parallel composition gives a total privacy budget of (epsilon = {}, delta = {}). \
             A sequential reading would instead add the per-class budgets.",
            cfg.dp.epsilon, cfg.dp.delta
        ),
        format!(
            "Top-k projection keeps the {} most probable next tokens given the projected prefix \
             and picks the nearest embedding among them.",
            cfg.admm.k
        ),
        format!("Label check mode: {}.", config::mode_name(cfg.filter.mode)),
    ]
}

fn cmd_report(cfg: &RunConfig, w: &mut Writer) -> CliResult<()> {
    let metrics = read_metrics(&input(cfg, METRICS)?)?;
    let ft = read_metrics(&input(cfg, FINETUNE_METRICS)?)?;
    let gerr = read_grad_error(&input(cfg, GRAD_ERROR)?)?;
    let filter = read_json(&input(cfg, FILTER_REPORT)?)?;
    let theory_path = cfg.paths.out_dir.join(THEORY_REPORT);
    let theory = if theory_path.exists() {
        Some(read_json(&theory_path)?)
    } else {
        None
    };
    let accuracy_series: Vec<Value> = ft
        .iter()
        .filter(|(m, _, _)| m == "accuracy")
        .map(|(_, s, v)| json!({ "split": s, "value": v }))
        .collect();
    let report = json!({
        "config": config_echo(cfg),
        "metrics": metrics.iter().map(|(m, s, v)| json!({"metric": m, "split": s, "value": v})).collect::<Vec<_>>(),
        "accuracy_series": accuracy_series,
        "grad_error": gerr,
        "filter": filter["filter"],
        "rho": filter["rho"],
        "theory": theory.as_ref().map(|t| t["suite"].clone()),
        "notes": report_notes(cfg),
    });
    w.json(REPORT_JSON, &report)?;

    let mut md = String::from("# Run report\n\n## Metrics\n\n| metric | split | value |\n|---|---|---|\n");
    for (m, s, v) in &metrics {
        md.push_str(&format!("| {m} | {s} | {v:.6} |\n"));
    }
    md.push_str("\n## Fine-tuning accuracy\n\n| split | value |\n|---|---|\n");
    for (_, s, v) in ft.iter().filter(|(m, _, _)| m == "accuracy") {
        md.push_str(&format!("| {s} | {v:.4} |\n"));
    }
    md.push_str("\n## Gradient error\n\n| step | set | last layer | full |\n|---|---|---|---|\n");
    for r in &gerr {
        md.push_str(&format!("| {} | {} | {:.4} | {:.4} |\n", r.step, r.set, r.last_layer, r.full));
    }
    md.push_str("\n## Filtering\n\n| class | generated | label check | lowest loss | balance |\n|---|---|---|---|---|\n");
    if let Some(counts) = filter["filter"]["counts"].as_array() {
        for c in counts {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                c["class"], c["generated"], c["after_label_check"], c["after_select"], c["after_balance"]
            ));
        }
    }
    md.push_str(&format!(
        "\nbalance warning: {}\n",
        filter["filter"]["balance_warning"]
    ));
    if let Some(t) = &theory {
        md.push_str(&format!("\n## Theory suite\n\npassed: {}\n", t["passed"]));
    }
    md.push_str("\n## Notes\n\n");
    for n in report_notes(cfg) {
        md.push_str(&format!("- {n}\n"));
    }
    md.push_str("\n## Configuration\n\n```\n");
    md.push_str(&cfg.to_text());
    md.push_str("```\n");
    w.text(REPORT_MD, &md)
}
