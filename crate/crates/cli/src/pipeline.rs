//! Experiment stages shared by the commands and the acceptance suite. Each
//! stage takes in-memory artifacts and a seed stream; the commands add file
//! I/O around them.

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use textdistill_core::admm::{
    auto_n_tokens, distill, project_topk_in, select_rho, topk_violation_in, ClassSpec, DistillOutput,
    Objective, RHO_GRID,
};
use textdistill_core::filter::{label_check_all, run_pipeline, FilterOutcome, LabelCheckMode, Scored};
use textdistill_core::lm::data::{encode, TOY_LABELS};
use textdistill_core::lm::model::random_ids;
use textdistill_core::lm::{
    finetune, log_perplexity, nll_loss, pretrain, Example, ModelParams, TokenSequence, ToyCorpus,
    TrainTrace, Vocab,
};
use textdistill_core::metrics::{
    accuracy, embed_all, fid, mia_advantage, nearest_real_distances, MetricRow,
};
use textdistill_core::target::{build_class_targets, build_target, GradientTarget};
use textdistill_core::theory::{empirical_grad_error, GradErrorRow};
use textdistill_core::{Error, SeedStream};

use crate::config::{Auto, RunConfig};
use crate::error::CliResult;

/// Raw text splits.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub corpus: Vec<Example>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub holdout: Vec<Example>,
    /// Labelled data reserved for the external label checker.
    pub checker: Vec<Example>,
}

/// Loads each split from its configured path or generates the toy version.
pub fn datasets(cfg: &RunConfig) -> CliResult<Datasets> {
    let root = SeedStream::new(cfg.seed).fork_str("data");
    let toy = ToyCorpus::default();
    let d = &cfg.data;
    let load = |p: &Option<std::path::PathBuf>, gen: &dyn Fn() -> Vec<Example>| match p {
        Some(p) => textdistill_core::lm::data::read_jsonl(p),
        None => Ok(gen()),
    };
    Ok(Datasets {
        corpus: load(&cfg.paths.corpus, &|| {
            ToyCorpus::pretrain(
                root.fork_str("corpus"),
                d.corpus_size,
                d.labelled_fraction,
                d.labelled_words,
            )
        })?,
        train: load(&cfg.paths.dataset, &|| toy.labelled(root.fork_str("train"), d.train_per_class))?,
        test: load(&cfg.paths.test, &|| toy.labelled(root.fork_str("test"), d.test_per_class))?,
        holdout: load(&cfg.paths.holdout, &|| {
            toy.labelled(root.fork_str("holdout"), d.holdout_per_class)
        })?,
        checker: toy.labelled(root.fork_str("checker"), d.checker_per_class),
    })
}

/// Sorted distinct labels of the labelled splits (the toy label names when
/// there are none).
pub fn label_set(ds: &Datasets) -> Vec<String> {
    let mut labels: Vec<String> = ds
        .train
        .iter()
        .chain(&ds.test)
        .chain(&ds.corpus)
        .filter_map(|e| e.label.clone())
        .collect();
    labels.sort();
    labels.dedup();
    if labels.is_empty() {
        labels = TOY_LABELS.iter().map(|s| s.to_string()).collect();
    }
    labels
}

pub fn build_vocab(cfg: &RunConfig, ds: &Datasets) -> CliResult<Vocab> {
    let texts = ds.corpus.iter().chain(&ds.train).map(|e| e.text.as_str());
    Ok(Vocab::build(texts, &label_set(ds), cfg.model.vocab_cap)?)
}

/// Tokenized splits for one vocabulary.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub corpus: Vec<TokenSequence>,
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub holdout: Vec<TokenSequence>,
    pub checker: Vec<TokenSequence>,
}

pub fn encode_all(cfg: &RunConfig, ds: &Datasets, vocab: &Vocab) -> CliResult<Encoded> {
    let n = cfg.model.n_max;
    let labelled = |x: &[Example]| -> CliResult<Vec<TokenSequence>> {
        let out = encode(x, vocab, n)?;
        if out.iter().any(|s| s.label.is_none()) {
            return Err(Error::Data("labelled split contains an unlabelled example".into()).into());
        }
        Ok(out)
    };
    Ok(Encoded {
        corpus: encode(&ds.corpus, vocab, n)?,
        train: labelled(&ds.train)?,
        test: labelled(&ds.test)?,
        holdout: labelled(&ds.holdout)?,
        checker: labelled(&ds.checker)?,
    })
}

/// Pretrains a fresh model on the corpus.
pub fn pretrain_stage(
    cfg: &RunConfig,
    vocab: &Vocab,
    corpus: &[TokenSequence],
) -> CliResult<(ModelParams, Vec<f64>)> {
    let seed = SeedStream::new(cfg.seed).fork_str("pretrain");
    let init = ModelParams::init(cfg.model_config(vocab.len()), seed.fork_str("init"))?;
    info!(
        "pretraining {} params on {} sequences for {} steps",
        init.num_params(),
        corpus.len(),
        cfg.pretrain.steps
    );
    Ok(pretrain(corpus, &init, &cfg.pretrain_config(), seed.fork_str("train"))?)
}

/// Fine-tunes the base model on the checker split to serve as the external
/// label checker.
pub fn train_checker(cfg: &RunConfig, base: &ModelParams, data: &Encoded) -> CliResult<ModelParams> {
    if data.checker.is_empty() {
        return Err(Error::Data("checker split is empty".into()).into());
    }
    let seed = SeedStream::new(cfg.seed).fork_str("checker");
    let trace = finetune(&data.checker, base, &cfg.finetune_config(), seed)?;
    Ok(trace.final_params().clone())
}

/// Everything the distill stage produces.
#[derive(Clone, Debug)]
pub struct DistillStage {
    pub targets: Vec<GradientTarget>,
    pub rho: f64,
    pub rho_scores: Vec<(f64, f64)>,
    pub specs: Vec<ClassSpec>,
    pub output: DistillOutput,
    pub filter: FilterOutcome,
    /// Surviving candidates as fine-tuning examples.
    pub synthetic: Vec<TokenSequence>,
}

/// Targets → (ρ selection) → ADMM pool → filter.
pub fn distill_stage(
    cfg: &RunConfig,
    params: &ModelParams,
    vocab: &Vocab,
    train: &[TokenSequence],
    checker: Option<&ModelParams>,
) -> CliResult<DistillStage> {
    let seed = SeedStream::new(cfg.seed).fork_str("distill");
    let n_classes = vocab.labels().len();
    let dp = cfg.dp_config();
    let targets = if cfg.dp.global {
        vec![build_target(train, params, &dp, seed.fork_str("target"))?]
    } else {
        build_class_targets(train, n_classes, params, &dp, seed.fork_str("target"))?
    };
    let lens = match cfg.admm.n_tokens {
        Auto::Auto => auto_n_tokens(train, n_classes)?,
        Auto::Fixed(n) => vec![n; n_classes],
    };
    let specs: Vec<ClassSpec> = (0..n_classes)
        .map(|c| ClassSpec {
            class: c,
            label_token: vocab.label_ids()[c],
            n_tokens: lens[c],
        })
        .collect();
    let init_pool = vocab.word_ids();
    let (rho, rho_scores) = match cfg.admm.rho {
        Auto::Fixed(r) => (r, Vec::new()),
        Auto::Auto => select_rho(
            params,
            &targets,
            &specs,
            &init_pool,
            &cfg.admm_config(1.0),
            &RHO_GRID,
            cfg.admm.pilot,
            seed.fork_str("rho"),
        )?,
    };
    let admm = cfg.admm_config(rho);
    info!(
        "distilling {} candidates per class with rho {rho}, T {}",
        admm.pool_per_class, admm.t
    );
    let output = distill(params, &targets, &specs, &init_pool, &admm, seed.fork_str("pool"))?;

    let scored: Vec<Scored> = output
        .pool
        .iter()
        .enumerate()
        .map(|(i, c)| Scored {
            index: i,
            class: c.class,
            loss: c.match_loss,
        })
        .collect();
    let fcfg = cfg.filter_config();
    let checker = match fcfg.mode {
        LabelCheckMode::Off => None,
        LabelCheckMode::LmLikelihood => Some(params),
        LabelCheckMode::ExternalClassifier => Some(checker.ok_or_else(|| {
            Error::InvalidArgument("external-classifier mode needs paths.checker".into())
        })?),
    };
    let verdicts = match checker {
        Some(m) => {
            let items: Vec<(Vec<usize>, usize)> =
                output.pool.iter().map(|c| (c.ids.clone(), c.class)).collect();
            Some(label_check_all(&items, m, vocab.label_ids())?)
        }
        None => None,
    };
    let filter = run_pipeline(&scored, verdicts.as_deref(), n_classes, &fcfg)?;
    let synthetic = filter
        .kept
        .iter()
        .map(|&i| {
            let c = &output.pool[i];
            TokenSequence::new(c.ids.clone(), vec![vocab.label_ids()[c.class]], Some(c.class))
        })
        .collect();
    Ok(DistillStage {
        targets,
        rho,
        rho_scores,
        specs,
        output,
        filter,
        synthetic,
    })
}

/// `per_class` random word sequences per class with the given lengths.
pub fn random_token_set(
    vocab: &Vocab,
    specs: &[ClassSpec],
    per_class: usize,
    seed: SeedStream,
) -> Vec<TokenSequence> {
    let mut rng = seed.rng();
    let pool = vocab.word_ids();
    let mut out = Vec::with_capacity(specs.len() * per_class);
    for s in specs {
        for _ in 0..per_class {
            out.push(TokenSequence::new(
                random_ids(&mut rng, &pool, s.n_tokens),
                vec![s.label_token],
                Some(s.class),
            ));
        }
    }
    out
}

/// `per_class` real examples per class, drawn without replacement.
pub fn real_subset(
    train: &[TokenSequence],
    n_classes: usize,
    per_class: usize,
    seed: SeedStream,
) -> Vec<TokenSequence> {
    use rand::seq::SliceRandom;
    let mut rng = seed.rng();
    let mut out = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<&TokenSequence> =
            train.iter().filter(|s| s.label == Some(c)).collect();
        members.shuffle(&mut rng);
        out.extend(members.into_iter().take(per_class).cloned());
    }
    out
}

/// Fine-tunes `base` on `data` with snapshots.
pub fn finetune_stage(
    cfg: &RunConfig,
    base: &ModelParams,
    data: &[TokenSequence],
    tag: &str,
) -> CliResult<TrainTrace> {
    let seed = SeedStream::new(cfg.seed).fork_str("finetune").fork_str(tag);
    Ok(finetune(data, base, &cfg.finetune_config(), seed)?)
}

/// Test accuracy at every snapshot of a trace.
pub fn accuracy_series(
    trace: &TrainTrace,
    test: &[TokenSequence],
    vocab: &Vocab,
) -> CliResult<Vec<(usize, f64)>> {
    trace
        .snapshots
        .iter()
        .map(|(step, p)| Ok((*step, accuracy(p, test, vocab.label_ids())?)))
        .collect()
}

/// Best accuracy over the fine-tuned checkpoints of a series, leaving out
/// the untouched step-0 model unless it is the only entry.
pub fn best_finetuned(series: &[(usize, f64)]) -> f64 {
    let tuned = series.iter().filter(|(s, _)| *s > 0).map(|(_, a)| *a);
    let best = tuned.fold(f64::NEG_INFINITY, f64::max);
    if best.is_finite() {
        best
    } else {
        series.iter().map(|(_, a)| *a).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-candidate losses of equal-length random word sequences under each
/// candidate's own objective.
pub fn random_match_losses(
    params: &ModelParams,
    stage: &DistillStage,
    vocab: &Vocab,
    seed: SeedStream,
) -> CliResult<Vec<f64>> {
    let pool = vocab.word_ids();
    let out: Vec<f64> = stage
        .output
        .pool
        .par_iter()
        .map(|c| {
            let spec = &stage.specs[c.class];
            let target = stage
                .targets
                .iter()
                .find(|t| t.class == Some(c.class))
                .unwrap_or(&stage.targets[0]);
            let obj = Objective::new(params, target, spec.label_token)?;
            let mut rng = seed.fork(c.index as u64).rng();
            obj.value_ids(&random_ids(&mut rng, &pool, c.ids.len()))
        })
        .collect::<textdistill_core::Result<_>>()?;
    Ok(out)
}

/// Mean log-perplexity of the top-k projected candidates and of the plain
/// nearest-neighbour projections (same word support) of the same final
/// embeddings.
pub fn projection_perplexity(
    params: &ModelParams,
    stage: &DistillStage,
    vocab: &Vocab,
) -> CliResult<(f64, f64)> {
    let support = vocab.word_ids();
    let pairs: Vec<(f64, f64)> = stage
        .output
        .pool
        .par_iter()
        .map(|c| {
            let (nn, _) = project_topk_in(&c.x, params, support.len(), &support)?;
            Ok((log_perplexity(&c.ids, params)?, log_perplexity(&nn, params)?))
        })
        .collect::<textdistill_core::Result<_>>()?;
    let n = pairs.len().max(1) as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// Number of pool candidates that fail the top-k re-check over the word
/// support, hold an out-of-vocabulary id, or carry a projected row that is
/// not bit-equal to the id's embedding.
pub fn constraint_failures(
    params: &ModelParams,
    stage: &DistillStage,
    vocab: &Vocab,
    k: usize,
) -> CliResult<usize> {
    let support = vocab.word_ids();
    let emb = params.embeddings();
    let bad: Vec<bool> = stage
        .output
        .pool
        .par_iter()
        .map(|c| {
            if c.ids.iter().any(|&i| i >= params.config.vocab_size) {
                return Ok(true);
            }
            let rows_match = c
                .ids
                .iter()
                .enumerate()
                .all(|(p, &id)| c.z.row(p) == emb.row(id));
            Ok(!rows_match || topk_violation_in(&c.ids, params, k, &support)?.is_some())
        })
        .collect::<textdistill_core::Result<_>>()?;
    Ok(bad.iter().filter(|&&b| b).count())
}

/// Privacy and fidelity metrics of a fine-tuned model and its data.
#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub fid: f64,
    pub nearest: Vec<f64>,
    pub mia_advantage: f64,
    pub synthetic_log_ppl: f64,
}

/// `base` embeds texts for FID and distances; `tuned` is attacked.
pub fn evaluate(
    cfg: &RunConfig,
    base: &ModelParams,
    tuned: &ModelParams,
    vocab: &Vocab,
    data: &Encoded,
    tuned_on: &[TokenSequence],
) -> CliResult<Evaluation> {
    let seed = SeedStream::new(cfg.seed).fork_str("evaluate");
    let acc = accuracy(tuned, &data.test, vocab.label_ids())?;
    let syn_ids: Vec<Vec<usize>> = tuned_on.iter().map(|s| s.prompt.clone()).collect();
    let real_ids: Vec<Vec<usize>> = data.train.iter().map(|s| s.prompt.clone()).collect();
    let syn_emb = embed_all(base, &syn_ids)?;
    let real_emb = embed_all(base, &real_ids)?;
    let fid_v = fid(&real_emb, &syn_emb)?;
    let nearest = nearest_real_distances(&syn_emb, &real_emb)?;
    let losses = |set: &[TokenSequence]| -> textdistill_core::Result<Vec<f64>> {
        set.par_iter().map(|s| nll_loss(s, tuned)).collect()
    };
    let mia = mia_advantage(&losses(&data.train)?, &losses(&data.holdout)?, seed.fork_str("mia"))?;
    let ppl: Vec<f64> = syn_ids
        .par_iter()
        .filter(|ids| !ids.is_empty())
        .map(|ids| log_perplexity(ids, base))
        .collect::<textdistill_core::Result<_>>()?;
    Ok(Evaluation {
        accuracy: acc,
        fid: fid_v,
        nearest,
        mia_advantage: mia,
        synthetic_log_ppl: ppl.iter().sum::<f64>() / ppl.len().max(1) as f64,
    })
}

/// Metric rows for an evaluation.
pub fn evaluation_rows(e: &Evaluation, seed: u64) -> Vec<MetricRow> {
    let mean_nn = e.nearest.iter().sum::<f64>() / e.nearest.len().max(1) as f64;
    vec![
        MetricRow::new("accuracy", "test", e.accuracy, seed),
        MetricRow::new("fid", "synthetic_vs_train", e.fid, seed),
        MetricRow::new("nearest_real_mean", "synthetic", mean_nn, seed),
        MetricRow::new("mia_advantage", "train_vs_holdout", e.mia_advantage, seed),
        MetricRow::new("log_ppl", "synthetic", e.synthetic_log_ppl, seed),
    ]
}

/// Gradient errors of the fine-tuning set and of a random-token set of the
/// same shape along the trace of fine-tuning on the first set, plus the
/// random set along its own fine-tuning trace (`random_own`).
pub fn grad_error_series(
    real: &[TokenSequence],
    tuned_on: &[TokenSequence],
    trace: &TrainTrace,
    random: &[TokenSequence],
    random_trace: &TrainTrace,
) -> CliResult<Vec<GradErrorRow>> {
    let mut rows = empirical_grad_error(real, &[("distilled", tuned_on), ("random", random)], &trace.snapshots)?;
    rows.extend(empirical_grad_error(real, &[("random_own", random)], &random_trace.snapshots)?);
    rows.sort_by(|a, b| a.step.cmp(&b.step).then_with(|| a.set.cmp(&b.set)));
    Ok(rows)
}

/// All quantities the acceptance suite and the report need from one seed.
#[derive(Clone, Debug, Serialize)]
pub struct Experiment {
    pub seed: u64,
    pub vocab_size: usize,
    pub rho: f64,
    pub rho_scores: Vec<(f64, f64)>,
    pub pool_size: usize,
    pub kept: usize,
    pub constraint_failures: usize,
    pub median_match_loss: f64,
    pub median_random_match_loss: f64,
    pub topk_log_ppl: f64,
    pub nn_log_ppl: f64,
    pub acc_base: f64,
    pub acc_distilled: Vec<(usize, f64)>,
    pub acc_random: Vec<(usize, f64)>,
    pub acc_real: Vec<(usize, f64)>,
    pub grad_error: Vec<GradErrorRow>,
    pub filter: textdistill_core::filter::FilterReport,
    pub evaluation: Evaluation,
    pub samples: Vec<(String, String)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pretrain, distill, three fine-tuning runs and evaluation for one seed.
pub fn run_experiment(cfg: &RunConfig) -> CliResult<Experiment> {
    let ds = datasets(cfg)?;
    let vocab = build_vocab(cfg, &ds)?;
    let data = encode_all(cfg, &ds, &vocab)?;
    let (base, _) = pretrain_stage(cfg, &vocab, &data.corpus)?;
    let checker = match cfg.filter.mode {
        LabelCheckMode::ExternalClassifier => Some(train_checker(cfg, &base, &data)?),
        _ => None,
    };
    let stage = distill_stage(cfg, &base, &vocab, &data.train, checker.as_ref())?;
    let seed = SeedStream::new(cfg.seed).fork_str("baselines");
    let n_classes = vocab.labels().len();
    let random = random_token_set(&vocab, &stage.specs, cfg.filter.r, seed.fork_str("random"));
    let real = real_subset(&data.train, n_classes, cfg.data.real_baseline, seed.fork_str("real"));

    let syn_trace = finetune_stage(cfg, &base, &stage.synthetic, "distilled")?;
    let rnd_trace = finetune_stage(cfg, &base, &random, "random")?;
    let real_trace = finetune_stage(cfg, &base, &real, "real")?;
    let grad_error = grad_error_series(&data.train, &stage.synthetic, &syn_trace, &random, &rnd_trace)?;
    let random_losses = random_match_losses(&base, &stage, &vocab, seed.fork_str("match"))?;
    let (topk_log_ppl, nn_log_ppl) = projection_perplexity(&base, &stage, &vocab)?;
    let evaluation = evaluate(cfg, &base, syn_trace.final_params(), &vocab, &data, &stage.synthetic)?;
    let samples = stage
        .synthetic
        .iter()
        .map(|s| (vocab.labels()[s.label.unwrap_or(0)].clone(), vocab.detokenize(&s.prompt)))
        .collect();

    Ok(Experiment {
        seed: cfg.seed,
        vocab_size: vocab.len(),
        rho: stage.rho,
        rho_scores: stage.rho_scores.clone(),
        pool_size: stage.output.pool.len(),
        kept: stage.synthetic.len(),
        constraint_failures: constraint_failures(&base, &stage, &vocab, cfg.admm.k)?,
        median_match_loss: median(stage.output.pool.iter().map(|c| c.match_loss).collect()),
        median_random_match_loss: median(random_losses),
        topk_log_ppl,
        nn_log_ppl,
        acc_base: accuracy(&base, &data.test, vocab.label_ids())?,
        acc_distilled: accuracy_series(&syn_trace, &data.test, &vocab)?,
        acc_random: accuracy_series(&rnd_trace, &data.test, &vocab)?,
        acc_real: accuracy_series(&real_trace, &data.test, &vocab)?,
        grad_error,
        filter: stage.filter.report.clone(),
        evaluation,
        samples,
    })
}
