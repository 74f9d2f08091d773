//! `ttgen` command line: `train`, `adapt`, `eval`, `report`, `data`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{invalid, Result};
use crate::harness::checkpoint::{load_model, load_trainer, save_outcome, save_trainer, MANIFEST_FILE};
use crate::harness::experiments::{
    parse_strategies, run_experiment, timing_cells, worker_threads, DeskSetup, ModelCache, EXPERIMENTS,
};
use crate::harness::report::{write_jsonl, ExperimentReport, PLOT_DIR, REPORT_FILE, SUMMARY_FILE};
use crate::metatrain::{TrainConfig, TrainMetrics, Trainer};
use crate::objectives::UnsupervisedLoss;
use crate::synthdata::{export_datasets, import_datasets, make_rotated_domains, stream, DomainDataset, DomainStream, OrderPolicy};
use crate::ttg::{make_strategy, run_stream, StrategyKind, StrategyOptions, TENT_LR};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAINER_DIR: &str = "trainer";

#[derive(Debug, Parser)]
#[command(name = "ttgen", version, about = "Test-time parameter generation on synthetic domain shifts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a backbone and generator on source domains.
    Train(TrainArgs),
    /// Run one test-time strategy over a target stream.
    Adapt(AdaptArgs),
    /// Run an experiment protocol over several seeds.
    Eval(EvalArgs),
    /// Rebuild summary.csv and plots from stored records.
    Report(ReportArgs),
    /// Export synthetic rotated domains as raw tensors plus a manifest.
    Data(DataArgs),
}

fn parse_gen_layers(s: &str) -> std::result::Result<usize, String> {
    match s {
        "2" | "4" | "8" => Ok(s.parse().expect("digit")),
        _ => Err("generator depth must be 2, 4 or 8".into()),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TrainConfig JSON; defaults to the desk schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Source domains exported with `data`; otherwise rotated domains are drawn.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "0,30,60")]
    pub angles: String,
    #[arg(long, default_value_t = 300)]
    pub n_per_domain: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long = "ttg-loss")]
    pub ttg_loss: Option<UnsupervisedLoss>,
    #[arg(long = "gen-layers", value_parser = parse_gen_layers)]
    pub gen_layers: Option<usize>,
    /// Save a resumable trainer checkpoint every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from `<out>/trainer` if it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub strategy: StrategyKind,
    /// `rotated:<angles>[;order=single|interleaved][;seed=S][;n=N][;data_seed=D]`
    /// or `data:<dir>[;order=...][;seed=S]`.
    #[arg(long)]
    pub stream: String,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    /// Output directory; defaults to `<ckpt>/adapt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = TENT_LR)]
    pub tent_lr: f64,
    /// Tent updates every parameter instead of the BN affine ones.
    #[arg(long)]
    pub tent_full: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_parser = EXPERIMENTS)]
    pub experiment: String,
    /// DeskSetup JSON; defaults to the desk setup (or `--quick`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub quick: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub strategies: Option<String>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long = "ttg-loss")]
    pub ttg_loss: Option<UnsupervisedLoss>,
    #[arg(long = "gen-layers", value_parser = parse_gen_layers)]
    pub gen_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// An experiment output directory, or a directory of them.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "0,30,60,90")]
    pub angles: String,
    #[arg(long, default_value_t = 300)]
    pub n_per_domain: usize,
    #[arg(long, default_value_t = 5)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Data(a) => data_cmd(a),
    }
}

pub fn parse_angles(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|e| invalid(format!("bad angle `{p}`: {e}"))))
        .collect()
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn append_metrics(path: &Path, rows: &[TrainMetrics]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::desk(Default::default()),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.n_iter {
        config.n_iter = n;
    }
    if let Some(l) = a.ttg_loss {
        config.loss = l;
    }
    if let Some(l) = a.gen_layers {
        config.generator.n_layers = l;
    }
    let sources = match &a.data {
        Some(dir) => import_datasets(dir)?,
        None => {
            let b = &config.backbone;
            make_rotated_domains(a.data_seed, &parse_angles(&a.angles)?, a.n_per_domain, b.n_classes, b.image_size)?
        }
    };
    fs::create_dir_all(&a.out)?;
    let trainer_dir = a.out.join(TRAINER_DIR);
    let metrics_path = a.out.join(METRICS_FILE);
    let mut trainer = if a.resume && trainer_dir.join(MANIFEST_FILE).exists() {
        let t = load_trainer(&trainer_dir, &sources)?;
        if t.config.hash() != config.hash() {
            return Err(invalid("resume checkpoint was written with a different config"));
        }
        log::info!("resuming at iteration {}", t.state.iter);
        write_jsonl(&metrics_path, &t.metrics)?;
        t
    } else {
        write_jsonl::<TrainMetrics>(&metrics_path, &[])?;
        Trainer::new(config.clone(), &sources)?
    };
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    while !trainer.done() {
        let logged = trainer.metrics.len();
        trainer.step()?;
        append_metrics(&metrics_path, &trainer.metrics[logged..])?;
        if let Some(m) = trainer.metrics[logged..].last() {
            log::info!(
                "iter {} source_ce {:.4} target_ce {:.4}{}",
                m.iter,
                m.meta_source_ce,
                m.meta_target_ce,
                m.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default()
            );
        }
        if a.checkpoint_every.is_some_and(|k| k > 0 && trainer.state.iter % k == 0) {
            save_trainer(&trainer_dir, &trainer)?;
        }
    }
    let outcome = trainer.finish()?;
    save_outcome(&a.out, &config, &outcome)?;
    println!(
        "saved {} (config {}, best iter {:?}, val acc {:?})",
        a.out.display(),
        &outcome.config_hash[..12],
        outcome.best_iter,
        outcome.best_val_acc
    );
    Ok(())
}

/// A parsed `--stream` argument.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub source: StreamSource,
    pub order: OrderPolicy,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StreamSource {
    Rotated { angles: Vec<f64>, n_per_domain: usize, data_seed: u64 },
    Data(PathBuf),
}

impl std::str::FromStr for StreamSpec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        let head = parts.next().unwrap_or("");
        let (kind, arg) = head.split_once(':').ok_or_else(|| invalid(format!("stream `{s}` lacks a `kind:` prefix")))?;
        let (mut order, mut seed, mut n, mut data_seed) = (OrderPolicy::SingleDomain, 0, 300, 0);
        for p in parts.filter(|p| !p.is_empty()) {
            let (k, v) = p.split_once('=').ok_or_else(|| invalid(format!("bad stream option `{p}`")))?;
            let num = || v.parse::<u64>().map_err(|e| invalid(format!("bad value for `{k}`: {e}")));
            match k {
                "order" => order = v.parse()?,
                "seed" => seed = num()?,
                "n" => n = num()? as usize,
                "data_seed" => data_seed = num()?,
                _ => return Err(invalid(format!("unknown stream option `{k}`"))),
            }
        }
        let source = match kind {
            "rotated" => StreamSource::Rotated { angles: parse_angles(arg)?, n_per_domain: n, data_seed },
            "data" => StreamSource::Data(PathBuf::from(arg)),
            other => Err(invalid(format!("unknown stream kind `{other}` (rotated|data)")))?,
        };
        Ok(Self { source, order, seed })
    }
}

impl StreamSpec {
    pub fn datasets(&self, n_classes: usize, image_size: usize) -> Result<Vec<DomainDataset>> {
        match &self.source {
            StreamSource::Rotated { angles, n_per_domain, data_seed } => {
                make_rotated_domains(*data_seed, angles, *n_per_domain, n_classes, image_size)
            }
            StreamSource::Data(dir) => import_datasets(dir),
        }
    }

    pub fn build(&self, n_classes: usize, image_size: usize, batch_size: usize) -> Result<DomainStream> {
        stream(&self.datasets(n_classes, image_size)?, batch_size, self.order, self.seed)
    }
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let ck = load_model(&a.ckpt)?;
    let spec: StreamSpec = a.stream.parse()?;
    let b = ck.model.backbone.spec();
    let s = spec.build(b.n_classes, b.image_size, a.batch_size)?;
    let opts = StrategyOptions { tent_lr: a.tent_lr, tent_full: a.tent_full, ..Default::default() };
    let mut strategy = make_strategy(a.strategy, &ck.model, opts)?;
    let m = run_stream(&s, strategy.as_mut())?;
    let out = a.out.unwrap_or_else(|| a.ckpt.join("adapt"));
    fs::create_dir_all(&out)?;
    write_jsonl(&out.join(format!("adapt_{}.jsonl", a.strategy.name())), &m.batches)?;
    let summary = out.join(SUMMARY_FILE);
    let fresh = !summary.exists();
    let mut w = csv::Writer::from_writer(OpenOptions::new().create(true).append(true).open(&summary)?);
    if fresh {
        w.write_record([
            "strategy", "stream", "batch_size", "config_hash", "n", "n_correct", "accuracy", "wallclock_ms",
            "adapt_ms_median", "adapt_ms_p95", "degenerate",
        ])
        .map_err(|e| invalid(e.to_string()))?;
    }
    let (med, p95) = m.adapt_ms_quantiles();
    let row = [
        a.strategy.name().to_string(),
        a.stream.clone(),
        a.batch_size.to_string(),
        ck.manifest.config_hash.clone(),
        m.n().to_string(),
        m.n_correct().to_string(),
        m.accuracy().to_string(),
        m.wallclock_ms().to_string(),
        med.to_string(),
        p95.to_string(),
        m.any_degenerate().to_string(),
    ];
    w.write_record(&row).map_err(|e| invalid(e.to_string()))?;
    w.flush()?;
    println!("{} accuracy {:.4} over {} samples ({} batches)", a.strategy, m.accuracy(), m.n(), m.batches.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut setup = match (&a.config, a.quick) {
        (Some(p), _) => read_json::<DeskSetup>(p)?,
        (None, true) => DeskSetup::quick(),
        (None, false) => DeskSetup::desk(),
    };
    if let Some(s) = &a.seeds {
        setup.seeds = s
            .split(',')
            .map(|x| x.trim().parse::<u64>().map_err(|e| invalid(format!("bad seed `{x}`: {e}"))))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = &a.strategies {
        setup.strategies = parse_strategies(s)?;
    }
    if let Some(n) = a.n_iter {
        setup.train.n_iter = n;
    }
    if let Some(l) = a.ttg_loss {
        setup.train.loss = l;
    }
    if let Some(l) = a.gen_layers {
        setup.train.generator.n_layers = l;
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join(&a.experiment));
    log::info!("{} over seeds {:?} with {} worker(s)", a.experiment, setup.seeds, worker_threads());
    let mut report = run_experiment(&a.experiment, &setup, &ModelCache::new())?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("setup.json"), serde_json::to_string_pretty(&setup)?)?;
    report.write(&out)?;
    print!("{}", report.summary_csv());
    Ok(())
}

/// Rebuilds one experiment directory's summary and plots from its JSONL files.
pub fn regenerate(dir: &Path) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::read(dir)?;
    if r.experiment == "timing" {
        r.cells.retain(|c| !c.metric.starts_with("adapt_ms"));
        r.cells.extend(timing_cells(&r.batches));
    }
    fs::write(dir.join(SUMMARY_FILE), r.summary_csv())?;
    if let Err(e) = r.write_plots(&dir.join(PLOT_DIR)) {
        log::warn!("plotting failed for {}: {e}", r.experiment);
    }
    Ok(r)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let dirs: Vec<PathBuf> = if a.dir.join(REPORT_FILE).exists() {
        vec![a.dir.clone()]
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(&a.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(REPORT_FILE).exists())
            .collect();
        v.sort();
        v
    };
    if dirs.is_empty() {
        return Err(invalid(format!("no experiment reports under {}", a.dir.display())));
    }
    for d in dirs {
        let r = regenerate(&d)?;
        println!("{}: {} cells -> {}", r.experiment, r.cells.len(), d.join(SUMMARY_FILE).display());
    }
    Ok(())
}

fn data_cmd(a: DataArgs) -> Result<()> {
    let ds = make_rotated_domains(a.seed, &parse_angles(&a.angles)?, a.n_per_domain, a.n_classes, a.image_size)?;
    export_datasets(&ds, &a.out)?;
    println!("wrote {} domains to {}", ds.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_spec_parses() {
        let s: StreamSpec = "rotated:30,45;order=interleaved;seed=4;n=50".parse().unwrap();
        assert_eq!(s.order, OrderPolicy::InterleavedRandom);
        assert_eq!(s.seed, 4);
        assert_eq!(s.source, StreamSource::Rotated { angles: vec![30.0, 45.0], n_per_domain: 50, data_seed: 0 });
        assert!("rotated:30;bogus=1".parse::<StreamSpec>().is_err());
        assert!("30,45".parse::<StreamSpec>().is_err());
    }

    #[test]
    fn gen_layers_flag_accepts_only_listed_depths() {
        assert!(Cli::try_parse_from(["ttgen", "train", "--out", "x", "--gen-layers", "4"]).is_ok());
        assert!(Cli::try_parse_from(["ttgen", "train", "--out", "x", "--gen-layers", "3"]).is_err());
        assert!(Cli::try_parse_from(["ttgen", "eval", "bogus"]).is_err());
    }

    #[test]
    fn train_adapt_report_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        let ck_s = ck.to_str().unwrap();
        let code = run([
            "ttgen", "train", "--out", ck_s, "--n-iter", "6", "--n-per-domain", "20", "--gen-layers", "2",
            "--ttg-loss", "pseudo",
        ]);
        assert_eq!(code, 0);
        let lines = fs::read_to_string(ck.join(METRICS_FILE)).unwrap();
        assert!(!lines.is_empty());
        for l in lines.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            for k in ["iter", "meta_source_ce", "meta_target_ce", "wallclock_s"] {
                assert!(v.get(k).is_some(), "missing {k}");
            }
        }
        let code = run([
            "ttgen", "adapt", "--ckpt", ck_s, "--strategy", "generalizeformer", "--stream", "rotated:90;n=20",
            "--batch-size", "5",
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(ck.join("adapt").join(SUMMARY_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 2);

        let blob = ck.join(crate::harness::checkpoint::BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[9] ^= 1;
        fs::write(&blob, bytes).unwrap();
        let code = run(["ttgen", "adapt", "--ckpt", ck_s, "--strategy", "erm", "--stream", "rotated:90;n=20"]);
        assert_ne!(code, 0);
    }
}
