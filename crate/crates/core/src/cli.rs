//! Command-line front end.

use crate::cnn::{bake_channels, ChannelMask, CnnGraph};
use crate::config::RunConfig;
use crate::cost::{budget_from_ratio, CostModel};
use crate::error::{Error, Result};
use crate::eval::{
    budget_sweep, evaluate, evaluate_cnn, predictions, random_masks, write_sweep_csv, EvalReport,
};
use crate::importance::{score_all, score_cnn, token_importance, ImportanceTable};
use crate::io::{
    load_batch, load_container, make_reference, read_json, save_batch, save_cnn, save_model,
    to_json_string, verify_reference, LabeledBatch, LoadedModel, Reference,
};
use crate::model::{ModelGraph, PruneMask};
use crate::search::{channel_search, plan, token_schedule, SearchStep};
use crate::toy::{
    toy_cnn, toy_feature_batch, toy_image_batch, toy_model, toy_token_batch, ToyCnnConfig,
    ToyConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "trajprune",
    version,
    about = "Trajectory-based one-shot structured pruning"
)]
pub struct Cli {
    #[command(flatten)]
    pub opts: RunOpts,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for the run configuration. Flags beat `--config` values.
#[derive(Debug, Clone, Default, Args)]
pub struct RunOpts {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `language` or `vision`; selects the default lambda.
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// `ffn`, `l_norm` or `im_dense`.
    #[arg(long, global = true)]
    pub tap: Option<String>,
    /// `i`, `i+1`, `i..N` or `i+1..N`.
    #[arg(long, global = true)]
    pub depth: Option<String>,
    /// `sum` or `mean`.
    #[arg(long, global = true)]
    pub aggregation: Option<String>,
    /// `beta`, `tau` or `tau-inf`.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long = "keep-ratio", global = true)]
    pub keep_ratio: Option<f64>,
    #[arg(long = "batch-size", global = true)]
    pub batch_size: Option<usize>,
    #[arg(long = "token-share", global = true)]
    pub token_share: Option<f64>,
}

impl RunOpts {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = &self.task {
            cfg.set("task", t)?;
        }
        let pairs: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("temperature", self.temperature.map(|v| v.to_string())),
            ("tap", self.tap.clone()),
            ("depth", self.depth.clone()),
            ("aggregation", self.aggregation.clone()),
            ("mode", self.mode.clone()),
            ("keep_ratio", self.keep_ratio.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("token_share", self.token_share.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    Transformer,
    Cnn,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every prunable unit and write the importance table.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search a mask under the FLOPs budget.
    Search {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        table: PathBuf,
        /// Mask output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Search summary output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Add a token schedule to an existing mask so it meets the budget.
    Schedule {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bake a mask into a new container.
    Prune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a masked model against the original on a batch.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        /// Also evaluate this many random masks at the same budget (needs --table).
        #[arg(long, default_value_t = 0)]
        random: usize,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Budget sweep as CSV.
    Report {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        table: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.4,0.5,0.6,0.7,0.8,0.9,1.0"
        )]
        ratios: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded random model and a labeled batch.
    Toy {
        #[arg(long, value_enum, default_value_t = ToyKind::Transformer)]
        kind: ToyKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        batch_out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Tokens per sample, or image side for CNNs.
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        /// Token batches over this vocabulary instead of features.
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, default_value_t = 3)]
        blocks: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        ffn: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Check a model's logits against a recorded reference.
    Verify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Record a reference from this engine instead of checking one.
        #[arg(long)]
        write: bool,
    },
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| Error::Usage(format!("missing --{what}")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn transformer(m: LoadedModel) -> Result<ModelGraph> {
    match m {
        LoadedModel::Transformer(m) => Ok(m),
        LoadedModel::Cnn(_) => Err(Error::Arch("command needs a transformer model".into())),
    }
}

fn image_hw(table: &ImportanceTable) -> Result<[usize; 2]> {
    table
        .input_hw
        .ok_or_else(|| Error::Config("table has no channel scores".into()))
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    mode: &'a str,
    keep_ratio: f64,
    budget: u64,
    baseline: u64,
    achieved_flops: u64,
    achieved_ratio: f64,
    cumulative_importance: f64,
    token_counts: Option<&'a [usize]>,
    steps: &'a [SearchStep],
}

#[derive(Serialize)]
struct RandomSummary {
    count: usize,
    mean_logit_kl: f64,
    mean_agreement: f64,
    scored_kl_rank: usize,
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    random: Option<RandomSummary>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Usage(e.to_string().trim_end().to_string())),
    };
    let cfg = cli.opts.resolve()?;
    match cli.command {
        Command::Score { model, batch, out } => {
            let model = load_container(pick(&model, &cfg.model, "model")?)?;
            let batch = load_batch(pick(&batch, &cfg.batch, "batch")?)?.batch;
            let table = match &model {
                LoadedModel::Transformer(m) => {
                    let mut t = score_all(m, &batch, &cfg.score)?;
                    if cfg.mode.uses_tokens() {
                        t.token_scores = Some(token_importance(m, &batch, &cfg.score)?);
                    }
                    t
                }
                LoadedModel::Cnn(g) => score_cnn(g, &batch, &cfg.score)?,
            };
            emit(
                out.as_deref().or(cfg.output.as_deref()),
                &to_json_string(&table)?,
            )
        }
        Command::Search {
            model,
            table,
            out,
            report,
        } => {
            let model = load_container(pick(&model, &cfg.model, "model")?)?;
            let table: ImportanceTable = read_json(table)?;
            let out = out.as_deref().or(cfg.output.as_deref());
            match model {
                LoadedModel::Transformer(m) => {
                    let cost = CostModel::new(&m, table.seq_len)?;
                    let budget = budget_from_ratio(&cost, cfg.keep_ratio)?;
                    let p = plan(&table, &cost, budget, cfg.mode, cfg.token_share)?;
                    if let Some(r) = report {
                        let summary = SearchSummary {
                            mode: cfg.mode.as_str(),
                            keep_ratio: cfg.keep_ratio,
                            budget,
                            baseline: cost.baseline(),
                            achieved_flops: p.achieved_flops,
                            achieved_ratio: cost.ratio(p.achieved_flops),
                            cumulative_importance: p.search.cumulative_importance,
                            token_counts: p.mask.token_counts.as_deref(),
                            steps: &p.search.steps,
                        };
                        std::fs::write(r, to_json_string(&summary)?)?;
                    }
                    emit(out, &to_json_string(&p.mask)?)
                }
                LoadedModel::Cnn(g) => {
                    let scores = table
                        .channel_scores
                        .as_ref()
                        .ok_or_else(|| Error::Config("table has no channel scores".into()))?;
                    let [h, w] = image_hw(&table)?;
                    let full = crate::cnn::cnn_flops(&g, &ChannelMask::full(&g), h, w)?;
                    let budget = (cfg.keep_ratio * full as f64).floor() as u64;
                    let r = channel_search(&g, scores, budget, h, w)?;
                    if let Some(rp) = report {
                        std::fs::write(rp, to_json_string(&r)?)?;
                    }
                    emit(out, &to_json_string(&r.mask)?)
                }
            }
        }
        Command::Schedule {
            model,
            table,
            mask,
            out,
        } => {
            let m = transformer(load_container(pick(&model, &cfg.model, "model")?)?)?;
            let table: ImportanceTable = read_json(table)?;
            let mut mask: PruneMask = read_json(mask)?;
            let scores = table.token_scores.as_ref().ok_or_else(|| {
                Error::Config("table has no token scores; score with --mode tau".into())
            })?;
            let cost = CostModel::new(&m, table.seq_len)?;
            let budget = budget_from_ratio(&cost, cfg.keep_ratio)?;
            mask.token_counts = None;
            let s = token_schedule(scores, &cost, &mask, budget)?;
            mask.token_counts = Some(s.counts);
            emit(
                out.as_deref().or(cfg.output.as_deref()),
                &to_json_string(&mask)?,
            )
        }
        Command::Prune { model, mask, out } => {
            match load_container(pick(&model, &cfg.model, "model")?)? {
                LoadedModel::Transformer(m) => {
                    let mask: PruneMask = read_json(mask)?;
                    save_model(out, &crate::io::bake_mask(&m, &mask)?)
                }
                LoadedModel::Cnn(g) => {
                    let mask: ChannelMask = read_json(mask)?;
                    save_cnn(out, &bake_channels(&g, &mask)?)
                }
            }
        }
        Command::Eval {
            model,
            batch,
            mask,
            random,
            table,
            out,
        } => {
            let model = load_container(pick(&model, &cfg.model, "model")?)?;
            let batch = load_batch(pick(&batch, &cfg.batch, "batch")?)?;
            let output = match model {
                LoadedModel::Transformer(m) => {
                    eval_transformer(&m, &batch, &read_json(mask)?, random, table, cfg.seed)?
                }
                LoadedModel::Cnn(g) => {
                    if random > 0 {
                        return Err(Error::Usage(
                            "--random is only supported for transformers".into(),
                        ));
                    }
                    let mask: ChannelMask = read_json(mask)?;
                    EvalOutput {
                        report: evaluate_cnn(&g, &batch, &mask)?,
                        random: None,
                    }
                }
            };
            emit(
                out.as_deref().or(cfg.output.as_deref()),
                &to_json_string(&output)?,
            )
        }
        Command::Report {
            model,
            batch,
            table,
            ratios,
            out,
        } => {
            let m = transformer(load_container(pick(&model, &cfg.model, "model")?)?)?;
            let batch = load_batch(pick(&batch, &cfg.batch, "batch")?)?;
            let table: ImportanceTable = read_json(table)?;
            let rows = budget_sweep(&m, &batch, &table, &ratios, cfg.mode, cfg.token_share)?;
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            emit(
                out.as_deref().or(cfg.output.as_deref()),
                &String::from_utf8(buf).expect("csv is utf-8"),
            )
        }
        Command::Toy {
            kind,
            out,
            batch_out,
            samples,
            seq_len,
            vocab,
            blocks,
            d_model,
            heads,
            ffn,
            classes,
        } => {
            let (model, batch) = match kind {
                ToyKind::Transformer => {
                    let toy = ToyConfig {
                        n_blocks: blocks,
                        d_model,
                        n_heads: heads,
                        ffn_dim: ffn,
                        n_classes: classes,
                        vocab,
                        max_tokens: vocab.map(|_| seq_len),
                        ..ToyConfig::default()
                    };
                    let m = toy_model(&toy, cfg.seed)?;
                    let batch = match vocab {
                        Some(v) => toy_token_batch(v, samples, seq_len, cfg.seed + 1)?,
                        None => toy_feature_batch(d_model, samples, seq_len, cfg.seed + 1),
                    };
                    (LoadedModel::Transformer(m), batch)
                }
                ToyKind::Cnn => {
                    let toy = ToyCnnConfig {
                        n_classes: classes,
                        ..ToyCnnConfig::default()
                    };
                    let g: CnnGraph = toy_cnn(&toy, cfg.seed)?;
                    let batch = toy_image_batch(toy.in_channels, samples, seq_len, cfg.seed + 1);
                    (LoadedModel::Cnn(g), batch)
                }
            };
            match &model {
                LoadedModel::Transformer(m) => save_model(&out, m)?,
                LoadedModel::Cnn(g) => save_cnn(&out, g)?,
            }
            if let Some(bp) = batch_out {
                let labels = predictions(&model.logits(&batch)?)
                    .into_iter()
                    .map(|p| p as i32)
                    .collect();
                save_batch(
                    bp,
                    &LabeledBatch {
                        batch,
                        labels: Some(labels),
                    },
                )?;
            }
            Ok(())
        }
        Command::Verify {
            model,
            batch,
            reference,
            tolerance,
            write,
        } => {
            let model = load_container(pick(&model, &cfg.model, "model")?)?;
            let bytes = std::fs::read(pick(&batch, &cfg.batch, "batch")?)?;
            if write {
                return std::fs::write(
                    reference,
                    to_json_string(&make_reference(&model, &bytes)?)?,
                )
                .map_err(Error::from);
            }
            let r: Reference = read_json(reference)?;
            let diff = f64::from(verify_reference(&model, &bytes, &r)?);
            if diff > tolerance {
                return Err(Error::ReferenceMismatch(format!(
                    "max abs logit difference {diff:e} exceeds {tolerance:e}"
                )));
            }
            println!(
                "{}",
                serde_json::json!({ "max_abs_diff": diff, "tolerance": tolerance })
            );
            Ok(())
        }
    }
}

fn eval_transformer(
    m: &ModelGraph,
    batch: &LabeledBatch,
    mask: &PruneMask,
    random: usize,
    table: Option<PathBuf>,
    seed: u64,
) -> Result<EvalOutput> {
    let report = evaluate(m, batch, mask)?;
    let random = if random > 0 {
        let table: ImportanceTable =
            read_json(table.ok_or_else(|| Error::Usage("--random needs --table".into()))?)?;
        let cost = CostModel::new(m, batch.batch.seq_len())?;
        // same head/neuron budget as the scored mask, same token schedule
        let mut units_only = mask.clone();
        units_only.token_counts = None;
        let budget = cost.flops(&units_only)?;
        let mut kls = Vec::with_capacity(random);
        let mut agree = 0.0;
        for rm in random_masks(&table, &cost, budget, random, seed)? {
            let mut rm = rm;
            rm.token_counts = mask.token_counts.clone();
            let r = evaluate(m, batch, &rm)?;
            kls.push(r.logit_kl);
            agree += r.agreement;
        }
        let n = random as f64;
        Some(RandomSummary {
            count: random,
            mean_logit_kl: kls.iter().sum::<f64>() / n,
            mean_agreement: agree / n,
            scored_kl_rank: kls.iter().filter(|&&k| k < report.logit_kl).count(),
        })
    } else {
        None
    };
    Ok(EvalOutput { report, random })
}
