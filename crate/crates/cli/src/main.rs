use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coco_core::corpus::{
    filter_min_interactions, ingest, leave_one_out_split, synth_generate, EvalSplit, InteractionDataset, SynthConfig,
};
use coco_core::evalkit::{
    evaluate, export_embeddings, export_m_histogram, parse_grid, sweep, write_metrics_csv, write_report_json,
    EvalOptions, MetricsReport,
};
use coco_core::gradsuite::run_gradsuite;
use coco_core::promptvq::SEED_PROMPTS_ENV;
use coco_core::trainer::{fit_with_log, TrainConfig, TrainState, Variant, CONFIG_KEYS};

const RESOLVED_CONFIG: &str = "resolved-config";
const CHECKPOINT_FILE: &str = "checkpoint.coco";

fn config_help() -> String {
    let mut s = String::from("Config keys (for --config files and --set KEY=VALUE):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<16} {d}\n"));
    }
    s.push_str(&format!(
        "\nEnvironment: {SEED_PROMPTS_ENV} overrides the bundled seed-prompt file when `seed_prompts` is unset."
    ));
    s
}

#[derive(Parser)]
#[command(name = "coco", version, about = "Collaboration-enhanced sequential recommendation with a toy language model")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Read an interactions TSV and a catalog JSON-lines file into a dataset directory.
    Ingest(IngestArgs),
    /// Generate a synthetic category-chain dataset directory.
    Synth(SynthArgs),
    /// Train with early stopping; writes a checkpoint, metrics and the per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the valid or test split.
    Eval(EvalArgs),
    /// Train and evaluate one ablation variant.
    Ablate(AblateArgs),
    /// Train and evaluate every point of a config grid.
    Sweep(SweepArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Dump embeddings, the m histogram or the codebook of a checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Users with fewer interactions are dropped.
    #[arg(long, default_value_t = 5)]
    min_interactions: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 10)]
    categories: usize,
    /// Probability that the next category follows the chain.
    #[arg(long, default_value_t = 0.9)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_kv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => TrainConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v)?;
        }
        // pin the seed-prompt source so the written config reproduces the run
        if cfg.seed_prompts.is_empty() {
            if let Some(p) = std::env::var_os(SEED_PROMPTS_ENV) {
                cfg.seed_prompts = p.to_string_lossy().into_owned();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
#[command(after_help = config_help())]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by `ingest` or `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

impl From<SplitArg> for EvalSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Valid => EvalSplit::Valid,
            SplitArg::Test => EvalSplit::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Route scoring vectors through the gradient mask; metrics are unchanged.
    #[arg(long)]
    masking: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(after_help = config_help())]
struct AblateArgs {
    /// full | soft | dec | con | fuse_mlp | fuse_concat | backbone_only
    #[arg(long)]
    variant: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(after_help = config_help())]
struct SweepArgs {
    /// `key=v1,v2;key2=w1,w2`, first key outermost.
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all` or one of l_r, l_aux, l_ortho, l_q, decouple, align, lora_apply, l_total.
    #[arg(long, default_value = "all")]
    scope: String,
    /// Also write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Embeddings,
    MHist,
    Codebook,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    what: ExportWhat,
    /// Needed for embeddings and the m histogram.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 500)]
    max_users: usize,
    #[arg(long)]
    out: PathBuf,
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_resolved(dir: &Path, text: &str) -> Result<()> {
    fs::write(dir.join(RESOLVED_CONFIG), text).with_context(|| format!("writing {RESOLVED_CONFIG}"))
}

fn split_dataset(dir: &Path) -> Result<InteractionDataset> {
    let d = InteractionDataset::load_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(leave_one_out_split(&d)?)
}

fn train_into(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let d = split_dataset(data)?;
    prepare_out(out)?;
    write_resolved(out, &cfg.to_kv())?;
    let mut log = fs::File::create(out.join("epochs.jsonl"))?;
    let fitted = fit_with_log(&d, cfg, Some(&mut log))?;
    fitted.state.save(&out.join(CHECKPOINT_FILE))?;
    write_reports(out, &[fitted.report.clone(), fitted.valid])?;
    println!("{}", summary(&fitted.report));
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    train_into(&a.cfg.resolve()?, &a.data, &a.out)
}

fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_report_json(reports, &dir.join("report.json"))?;
    write_metrics_csv(reports, &dir.join("metrics.csv"))?;
    if let Some(r) = reports.first().filter(|r| r.m_hist.is_some()) {
        export_m_histogram(r, &dir.join("m_hist.csv"))?;
    }
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    let cut = |m: &std::collections::BTreeMap<usize, f64>| {
        m.iter().map(|(k, v)| format!("@{k}={v:.4}")).collect::<Vec<_>>().join(" ")
    };
    format!(
        "{} {} epoch={} R{} N{}",
        r.variant,
        r.split,
        r.epoch,
        cut(&r.recall),
        cut(&r.ndcg)
    )
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint)?;
    let d = split_dataset(&a.data)?;
    prepare_out(&a.out)?;
    write_resolved(&a.out, &state.model.cfg.to_kv())?;
    let mut opts = EvalOptions::new(&state.model.cfg.eval_ks);
    opts.masking = a.masking;
    let mut r = evaluate(&state.model, &d, a.split.into(), &opts)?;
    r.epoch = state.epoch;
    write_reports(&a.out, &[r.clone()])?;
    println!("{}", summary(&r));
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    cfg.variant = a.variant.parse::<Variant>()?;
    train_into(&cfg, &a.data, &a.out)
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let axes = parse_grid(&a.grid)?;
    let d = split_dataset(&a.data)?;
    prepare_out(&a.out)?;
    write_resolved(&a.out, &format!("# grid = {}\n{}", a.grid, cfg.to_kv()))?;
    let outcome = sweep(&d, &cfg, &axes, a.parallel)?;
    outcome.write_csv(&a.out.join("sweep.csv"))?;
    if let Some(r) = outcome.rows.iter().find(|r| r.status.starts_with("failed")) {
        bail!("grid point {} {}; partial results kept in sweep.csv", r.point, r.status);
    }
    println!("{} grid points", outcome.rows.len());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let entries = run_gradsuite(&a.scope)?;
    let mut ok = true;
    for e in &entries {
        println!(
            "{} {} max_rel_err={:.3e} tol={:e}",
            if e.passed() { "pass" } else { "FAIL" },
            e.check,
            e.report.max_rel_err(),
            e.report.tol
        );
        ok &= e.passed();
    }
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        write_resolved(dir, &format!("scope = {}\n", a.scope))?;
        fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&entries)?)?;
    }
    Ok(ok)
}

fn run_export(a: &ExportArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint)?;
    prepare_out(&a.out)?;
    write_resolved(&a.out, &state.model.cfg.to_kv())?;
    let data = || -> Result<InteractionDataset> {
        match &a.data {
            Some(p) => split_dataset(p),
            None => bail!("--data is required for this export"),
        }
    };
    match a.what {
        ExportWhat::Embeddings => {
            let n = export_embeddings(&state.model, &data()?, a.split.into(), a.max_users, &a.out.join("embeddings.csv"))?;
            println!("{n} rows");
        }
        ExportWhat::MHist => {
            let r = evaluate(&state.model, &data()?, a.split.into(), &EvalOptions::new(&state.model.cfg.eval_ks))?;
            export_m_histogram(&r, &a.out.join("m_hist.csv"))?;
            println!("mean m = {}", r.mean_m.unwrap_or(0.0));
        }
        ExportWhat::Codebook => {
            let Some(llm) = &state.model.llm else {
                bail!("variant `{}` has no codebook", state.model.cfg.variant);
            };
            let cb = llm.codebook.export(&state.model.registry);
            fs::write(a.out.join("codebook.json"), serde_json::to_string_pretty(&cb)?)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.verb {
        Verb::Ingest(a) => {
            let d = ingest(&a.interactions, &a.catalog)?;
            let d = filter_min_interactions(&d, a.min_interactions)?;
            d.save_dir(&a.out)?;
            write_resolved(
                &a.out,
                &format!(
                    "interactions = {}\ncatalog = {}\nmin_interactions = {}\n",
                    a.interactions.display(),
                    a.catalog.display(),
                    a.min_interactions
                ),
            )?;
            let c = d.counts();
            println!("{}", serde_json::to_string(&c)?);
        }
        Verb::Synth(a) => {
            let d = synth_generate(&SynthConfig::new(a.users, a.items, a.categories, a.signal, a.seed))?;
            d.save_dir(&a.out)?;
            write_resolved(
                &a.out,
                &format!(
                    "users = {}\nitems = {}\ncategories = {}\nsignal = {}\nseed = {}\n",
                    a.users, a.items, a.categories, a.signal, a.seed
                ),
            )?;
            println!("{}", serde_json::to_string(&d.counts())?);
        }
        Verb::Train(a) => run_train(&a)?,
        Verb::Eval(a) => run_eval(&a)?,
        Verb::Ablate(a) => run_ablate(&a)?,
        Verb::Sweep(a) => run_sweep(&a)?,
        Verb::Gradcheck(a) => return run_gradcheck(&a),
        Verb::Export(a) => run_export(&a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
