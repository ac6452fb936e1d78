//! Command-line experiment runner.
//!
//! Every verb reads one JSON config, writes its artifacts under the output
//! directory and records them in `manifest.json`. A verb whose previous run
//! used the same config hash and whose artifacts are intact is skipped unless
//! `--force` is given.

mod config;
mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{apply_override, DatasetSection, EvalOptions, ExperimentConfig, ReportOptions, OUT_ENV};
pub use manifest::{artifact_id, Artifact, RunManifest, StepRecord, MANIFEST_FILE};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::evalkit::{
    cross_eval, head_sweep, prepare_backbone, read_results, render_bar_chart, render_markdown, render_tables_csv,
    stage_sweep, write_results, EvalMeta, ExperimentKind, MaskCache, ResultsFile, ResultsMeta, SweepContext,
    SweepData,
};
use crate::maskops::{MaskProvider, MaskSource, OracleMasks, StrategyConfig};
use crate::segmodel::{evaluate_segmenter, train_segmenter, SegmenterModel};
use crate::synthset::{export_dataset, generate_dataset, load_directory, measure_bias, split_records, SampleRecord, Split};
use crate::trainkit::{train_classifier, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "maskbench", version, about = "Background-masking experiments on synthetic biased data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config value by dotted path, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Re-run even if the manifest says the step is complete.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Experiment config; only its output directory and report inputs are used.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory when no config is given.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Results files; defaults to `<out>/results/*.csv`.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into `<out>/data`.
    GenData(RunArgs),
    /// Train the foreground segmenter.
    TrainSeg(RunArgs),
    /// Dice scores of the segmenter on val, id_test and ood_test.
    EvalSeg(RunArgs),
    /// Train one classifier per seed under the configured strategy.
    TrainCls(RunArgs),
    /// Cross-evaluate the strategies listed in `eval.compare`.
    Eval(RunArgs),
    /// Mask at each stage of `eval.stages`.
    SweepStages(RunArgs),
    /// Head variants x strategies x regimes on a ViT.
    SweepHeads(RunArgs),
    /// Render results files to markdown, CSV and PNG.
    Report(ReportArgs),
}

/// Failure of a CLI invocation, carrying its exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Invalid(Error),
    #[error("{0}")]
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> std::result::Result<(), CliError> {
    if let Command::Report(args) = command {
        return report(args);
    }
    let args = match command {
        Command::GenData(a)
        | Command::TrainSeg(a)
        | Command::EvalSeg(a)
        | Command::TrainCls(a)
        | Command::Eval(a)
        | Command::SweepStages(a)
        | Command::SweepHeads(a) => a,
        Command::Report(_) => unreachable!("handled above"),
    };
    let cfg = ExperimentConfig::load(&args.config, &args.set).map_err(CliError::Invalid)?;
    let pipeline = Pipeline::new(cfg, args.force).map_err(CliError::Invalid)?;
    let result = match command {
        Command::GenData(_) => pipeline.step("gen-data", Pipeline::gen_data),
        Command::TrainSeg(_) => pipeline.step("train-seg", Pipeline::train_seg),
        Command::EvalSeg(_) => pipeline.step("eval-seg", Pipeline::eval_seg),
        Command::TrainCls(_) => pipeline.step("train-cls", Pipeline::train_cls),
        Command::Eval(_) => pipeline.step("eval", Pipeline::eval),
        Command::SweepStages(_) => pipeline.step("sweep-stages", Pipeline::sweep_stages),
        Command::SweepHeads(_) => pipeline.step("sweep-heads", Pipeline::sweep_heads),
        Command::Report(_) => unreachable!("handled above"),
    };
    result.map_err(CliError::Runtime)
}

fn ensure_writable(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::field("output_dir", format!("{}: {e}", out.display())))?;
    let probe = out.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::field("output_dir", format!("{} is not writable: {e}", out.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    hash: String,
    force: bool,
}

struct Splits {
    all: Vec<SampleRecord>,
}

impl Splits {
    fn get(&self, split: Split) -> Vec<SampleRecord> {
        split_records(&self.all, split)
    }
}

impl Pipeline {
    fn new(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        let out = cfg.output_dir();
        ensure_writable(&out)?;
        let hash = cfg.hash();
        Ok(Self { cfg, out, hash, force })
    }

    fn step(&self, name: &str, f: fn(&Self) -> Result<Vec<PathBuf>>) -> Result<()> {
        let mut manifest = RunManifest::load(&self.out)?;
        if !self.force && manifest.is_complete(&self.out, name, &self.hash) {
            eprintln!("{name}: up to date (config {}), skipping", &self.hash[..12]);
            return Ok(());
        }
        let started = manifest::unix_now();
        let cfg_path = self.out.join("config.json");
        fs::write(&cfg_path, self.cfg.to_json() + "\n")?;
        let mut paths = f(self)?;
        paths.push(cfg_path);
        manifest.record(&self.out, name, &self.hash, started, &paths)?;
        manifest.save(&self.out)?;
        eprintln!("{name}: done, {} artifacts", paths.len());
        Ok(())
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn segmenter_path(&self) -> PathBuf {
        self.out.join("segmenter.ckpt")
    }

    fn records(&self) -> Result<Splits> {
        let all = match (&self.cfg.dataset.path, &self.cfg.dataset.spec) {
            (Some(p), _) => load_directory(p)?,
            (None, Some(_)) if self.data_dir().join("labels.csv").exists() => load_directory(&self.data_dir())?,
            (None, Some(spec)) => generate_dataset(spec)?,
            (None, None) => return Err(Error::Config("no dataset configured".into())),
        };
        Ok(Splits { all })
    }

    /// Masks for `records` from the configured source.
    fn mask_provider(&self, records: &[SampleRecord]) -> Result<Box<dyn MaskProvider>> {
        match self.cfg.strategy.mask_source {
            MaskSource::Oracle => Ok(Box::new(OracleMasks)),
            MaskSource::Predicted => {
                let p = self.segmenter_path();
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "predicted masks need a trained segmenter at {}; run train-seg first",
                        p.display()
                    )));
                }
                let seg = SegmenterModel::load(&p)?;
                Ok(Box::new(MaskCache::build(&seg, records)?))
            }
        }
    }

    fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let spec = self
            .cfg
            .dataset
            .spec
            .as_ref()
            .ok_or_else(|| Error::Config("gen-data needs dataset.spec".into()))?;
        let records = generate_dataset(spec)?;
        let dir = self.data_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        export_dataset(&records, &dir)?;
        let bias = measure_bias(&records, spec.num_bg_families)?;
        let bias_path = self.out.join("bias.json");
        fs::write(&bias_path, serde_json::to_string_pretty(&bias)? + "\n")?;
        for (split, b) in &bias {
            eprintln!("  {}: designated-background fraction {b:.3}", split.as_str());
        }
        Ok(vec![dir, bias_path])
    }

    fn train_seg(&self) -> Result<Vec<PathBuf>> {
        let train = self.records()?.get(Split::Train);
        let (model, losses) = train_segmenter(&train, &self.cfg.segmenter)?;
        let ckpt = self.segmenter_path();
        model.save(&ckpt)?;
        let hist = self.out.join("seg_history.csv");
        let mut s = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.6}\n", i + 1));
        }
        fs::write(&hist, s)?;
        Ok(vec![ckpt, hist])
    }

    fn eval_seg(&self) -> Result<Vec<PathBuf>> {
        let model = SegmenterModel::load(&self.segmenter_path())?;
        let splits = self.records()?;
        let records: Vec<SampleRecord> = [Split::Val, Split::IdTest, Split::OodTest]
            .into_iter()
            .flat_map(|s| splits.get(s))
            .collect();
        let report = evaluate_segmenter(&model, &records)?;
        for (split, d) in &report.per_split {
            eprintln!("  {}: dice fg {:.4} bg {:.4} (n={})", split.as_str(), d.dice_fg, d.dice_bg, d.count);
        }
        let path = self.out.join("seg_eval.json");
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(vec![path])
    }

    fn context<'a>(&self, splits: &'a SweepSplits, masks: &'a dyn MaskProvider) -> SweepContext<'a> {
        SweepContext {
            data: SweepData {
                pretrain: &splits.pretrain,
                train: &splits.train,
                val: &splits.val,
                id_test: &splits.id_test,
                ood_test: &splits.ood_test,
            },
            classifier: crate::classifier::ClassifierConfig {
                backbone: self.cfg.backbone.clone(),
                head: self.cfg.head,
                num_classes: splits.num_classes,
                head_seed: 0,
                gap_fg_normalize: false,
            },
            train: self.cfg.train.clone(),
            pretrain: self.cfg.pretrain.clone(),
            seeds: self.cfg.seeds.clone(),
            masks,
            model_name: self.cfg.eval.model_name.clone(),
        }
    }

    fn sweep_splits(&self) -> Result<SweepSplits> {
        let s = self.records()?;
        let num_classes = match &self.cfg.dataset.spec {
            Some(spec) => spec.num_classes,
            None => s.all.iter().map(|r| r.label + 1).max().unwrap_or(0),
        };
        Ok(SweepSplits {
            pretrain: s.get(Split::Pretrain),
            train: s.get(Split::Train),
            val: s.get(Split::Val),
            id_test: s.get(Split::IdTest),
            ood_test: s.get(Split::OodTest),
            num_classes,
        })
    }

    fn checkpoint_path(&self, strategy: &StrategyConfig, seed: u64) -> PathBuf {
        let label = crate::evalkit::strategy_label(strategy).replace('@', "_");
        self.out.join("models").join(format!("{label}_seed{seed}.ckpt"))
    }

    fn train_one(&self, ctx: &SweepContext<'_>, strategy: &StrategyConfig, seed: u64) -> Result<(ClassifierModel, PathBuf)> {
        let resolved = strategy.resolve(&self.cfg.backbone)?;
        let base = prepare_backbone(ctx, seed)?;
        let cfg = TrainConfig {
            seed,
            ..self.cfg.train.clone()
        };
        let (model, history) = train_classifier(base, ctx.data.train, ctx.data.val, &cfg, &resolved, ctx.masks)?;
        let ckpt = self.checkpoint_path(strategy, seed);
        fs::create_dir_all(ckpt.parent().expect("checkpoint has a parent"))?;
        model.save(&ckpt)?;
        fs::write(ckpt.with_extension("history.csv"), history.to_csv())?;
        eprintln!(
            "  trained {} seed {seed}: final loss {:.4}",
            crate::evalkit::strategy_label(strategy),
            history.loss.last().copied().unwrap_or(f64::NAN)
        );
        Ok((model, ckpt))
    }

    fn train_cls(&self) -> Result<Vec<PathBuf>> {
        let splits = self.sweep_splits()?;
        let masks = self.mask_provider(&splits.all())?;
        let ctx = self.context(&splits, masks.as_ref());
        let mut paths = Vec::new();
        for &seed in &self.cfg.seeds {
            let (_, ckpt) = self.train_one(&ctx, &self.cfg.strategy, seed)?;
            paths.push(ckpt.with_extension("history.csv"));
            paths.push(ckpt);
        }
        Ok(paths)
    }

    fn results_meta(&self, kind: ExperimentKind) -> ResultsMeta {
        ResultsMeta {
            id_name: self.cfg.eval.id_name.clone(),
            ood_name: self.cfg.eval.ood_name.clone(),
            ..ResultsMeta::new(kind)
        }
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let splits = self.sweep_splits()?;
        let masks = self.mask_provider(&splits.all())?;
        let ctx = self.context(&splits, masks.as_ref());
        let trained = RunManifest::load(&self.out)?.is_complete(&self.out, "train-cls", &self.hash);
        let mut reports = Vec::new();
        for &seed in &self.cfg.seeds {
            for sc in &self.cfg.eval.compare {
                let ckpt = self.checkpoint_path(sc, seed);
                let model = if trained && *sc == self.cfg.strategy && ckpt.exists() {
                    ClassifierModel::load(&ckpt)?
                } else {
                    self.train_one(&ctx, sc, seed)?.0
                };
                let meta = EvalMeta {
                    model_id: self.cfg.eval.model_name.clone(),
                    strategy: crate::evalkit::strategy_label(sc),
                    regime: self.cfg.train.regime.as_str().into(),
                    seed,
                };
                let strategy = sc.resolve(&self.cfg.backbone)?;
                let r = cross_eval(&model, &splits.id_test, &splits.ood_test, &strategy, masks.as_ref(), meta)?;
                eprintln!(
                    "  {} seed {seed}: id {:.2}/{:.2} ood {:.2}/{:.2}",
                    r.meta.strategy, r.id_original, r.id_masked, r.ood_original, r.ood_masked
                );
                reports.push(r);
            }
        }
        let path = self.out.join("results").join("cross_eval.csv");
        write_results(&path, &ResultsFile::from_reports(self.results_meta(ExperimentKind::CrossEval), &reports))?;
        Ok(vec![path])
    }

    fn sweep_stages(&self) -> Result<Vec<PathBuf>> {
        let splits = self.sweep_splits()?;
        let masks = self.mask_provider(&splits.all())?;
        let ctx = self.context(&splits, masks.as_ref());
        let stages: Vec<&str> = self.cfg.eval.stages.iter().map(String::as_str).collect();
        let table = stage_sweep(&stages, &ctx)?;
        let path = self.out.join("results").join("stage_sweep.csv");
        let file = ResultsFile::from_sweep(self.results_meta(ExperimentKind::StageSweep), &ctx.model_name, &table);
        write_results(&path, &file)?;
        Ok(vec![path])
    }

    fn sweep_heads(&self) -> Result<Vec<PathBuf>> {
        let splits = self.sweep_splits()?;
        let masks = self.mask_provider(&splits.all())?;
        let ctx = self.context(&splits, masks.as_ref());
        let table = head_sweep(
            &self.cfg.eval.head_variants,
            &self.cfg.eval.head_strategies,
            &self.cfg.head_sweep_regimes(),
            &ctx,
        )?;
        let path = self.out.join("results").join("head_sweep.csv");
        let file = ResultsFile::from_sweep(self.results_meta(ExperimentKind::HeadSweep), &ctx.model_name, &table);
        write_results(&path, &file)?;
        Ok(vec![path])
    }
}

struct SweepSplits {
    pretrain: Vec<SampleRecord>,
    train: Vec<SampleRecord>,
    val: Vec<SampleRecord>,
    id_test: Vec<SampleRecord>,
    ood_test: Vec<SampleRecord>,
    num_classes: usize,
}

impl SweepSplits {
    /// Records that may need masks: everything but the pretrain split.
    fn all(&self) -> Vec<SampleRecord> {
        [&self.train, &self.val, &self.id_test, &self.ood_test]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }
}

fn report(args: &ReportArgs) -> std::result::Result<(), CliError> {
    let (out, mut inputs) = match &args.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p, &args.set).map_err(CliError::Invalid)?;
            (cfg.output_dir(), cfg.report.inputs)
        }
        None => (
            args.out
                .clone()
                .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs")),
            Vec::new(),
        ),
    };
    ensure_writable(&out).map_err(CliError::Invalid)?;
    if !args.inputs.is_empty() {
        inputs = args.inputs.clone();
    }
    render_report(&out, inputs, args.force).map_err(CliError::Runtime)
}

/// Writes `report/report.md` plus one CSV and one PNG per results file.
pub fn render_report(out: &Path, mut inputs: Vec<PathBuf>, force: bool) -> Result<()> {
    if inputs.is_empty() {
        let dir = out.join("results");
        if dir.is_dir() {
            inputs = fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            inputs.sort();
        }
    }
    let mut ids = String::new();
    for p in &inputs {
        ids.push_str(&artifact_id(p).map_err(|e| Error::Results {
            path: p.clone(),
            message: e.to_string(),
        })?);
    }
    let hash = {
        use sha2::Digest;
        hex::encode(sha2::Sha256::digest(ids.as_bytes()))
    };
    let mut manifest = RunManifest::load(out)?;
    if !force && manifest.is_complete(out, "report", &hash) {
        eprintln!("report: up to date, skipping");
        return Ok(());
    }
    let started = manifest::unix_now();
    let files = inputs.iter().map(|p| read_results(p)).collect::<Result<Vec<_>>>()?;
    let dir = out.join("report");
    fs::create_dir_all(&dir)?;
    let md = dir.join("report.md");
    fs::write(&md, render_markdown(&files))?;
    let mut paths = vec![md];
    for (i, f) in files.iter().enumerate() {
        let stem = format!("table{}_{}", i + 1, serde_json::to_value(f.meta.experiment)?.as_str().unwrap_or("t"));
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, render_tables_csv(f)?)?;
        let png = dir.join(format!("{stem}.png"));
        render_bar_chart(f).save(&png)?;
        paths.extend([csv, png]);
    }
    manifest.record(out, "report", &hash, started, &paths)?;
    manifest.save(out)?;
    eprintln!("report: {} tables written to {}", files.len(), dir.display());
    Ok(())
}
