//! Command-line front end. Exit status: 0 ok, 1 usage, 2 data or format.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::adapters::AdapterConfig;
use crate::backbone::{Backbone, BackboneConfig, EditSample};
use crate::baseline::{baseline_report, BaselineReport, SsimConfig};
use crate::corr::{CorrelationCell, CorrelationReport};
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::io::dataset::LabeledDump;
use crate::io::dump::{DumpHeader, HiddenDump};
use crate::io::manifest::{check_alignment, Manifest, ManifestSample, Provenance, ProvenanceKind};
use crate::io::mosdoc::MosDocument;
use crate::io::repro::{config_hash, effective_seed, Reproducibility};
use crate::io::samples::load_samples_dir;
use crate::io::synth::{build_benchmark, SynthConfig};
use crate::layers::{analyze, LayerFeatureSet, LayerStats, SaliencyConfig};
use crate::mos::{self, MosConfig, MosLabels};
use crate::pipeline::{backbone_dump, evaluate, train_probe, EvalSplit, LayerChoice, ProbeRun};
use crate::probe::{
    extract_features, finetune_end_to_end, read_model_file, write_model_file, FinetuneConfig, HeadKind,
    LabeledSample, Split, TrainConfig, TrainReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "editprobe", version, about = "Layer-probing evaluator for text-guided image edits")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark: ratings, hidden-state dump, manifest.
    Synth(SynthArgs),
    /// Screen ratings, reject subjects and compute MOS.
    Mos(MosArgs),
    /// Per-layer statistics, saliency and the selected layer.
    Layers(LayersArgs),
    /// Train probes on frozen features.
    Train(TrainArgs),
    /// Correlate probe predictions with MOS.
    Eval(EvalArgs),
    /// MSE / PSNR / SSIM against MOS on a samples directory.
    Baseline(BaselineArgs),
    /// Run the toy backbone over a samples directory and write a dump.
    Extract(ExtractArgs),
    /// Train adapters and a probe end to end through the toy backbone.
    Finetune(FinetuneArgs),
    /// Check a dump file and optionally its manifest.
    ValidateDump(ValidateArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Default,
    Noiseless,
    Nonlinear,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// 1-based planted layer (default: middle layer).
    #[arg(long)]
    planted_layer: Option<usize>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    rating_noise: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write a samples directory with rendered image pairs.
    #[arg(long)]
    images: bool,
}

#[derive(Args, Debug)]
struct MosArgs {
    /// CSV with columns subject_id,sample_id,dimension,score.
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flagged-rating fraction above which a subject is rejected.
    #[arg(long, default_value_t = mos::DEFAULT_REJECTION_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// MOS document from `mos`; overrides labels in the manifest.
    #[arg(long)]
    mos: Option<PathBuf>,
    /// Seed of the id-hash split, used when the manifest has no split labels.
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args, Debug, Clone)]
struct SaliencyArgs {
    #[arg(long, default_value_t = 1.0 / 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    gamma: f64,
    /// Histogram bins per dimension for the entropy.
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Quality levels for the discriminability ratio.
    #[arg(long, default_value_t = 5)]
    quality_bins: usize,
}

impl SaliencyArgs {
    fn config(&self) -> SaliencyConfig {
        SaliencyConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            hist_bins: self.bins,
            quality_bins: self.quality_bins,
            ..SaliencyConfig::default()
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DimensionArg {
    Quality,
    Alignment,
    Preservation,
    Overall,
    All,
}

impl DimensionArg {
    fn targets(self) -> Vec<Target> {
        match self {
            DimensionArg::Quality => vec![Target::Quality],
            DimensionArg::Alignment => vec![Target::Alignment],
            DimensionArg::Preservation => vec![Target::Preservation],
            DimensionArg::Overall => vec![Target::Overall],
            DimensionArg::All => Target::ALL.to_vec(),
        }
    }

    fn single(self) -> Result<Target> {
        match self.targets().as_slice() {
            [t] => Ok(*t),
            _ => Err(Error::Config("this command needs a single dimension".into())),
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum HeadArg {
    Mlp,
    Linear,
}

#[derive(Args, Debug)]
struct LayersArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    saliency: SaliencyArgs,
    #[arg(long, value_enum, default_value = "overall")]
    dimension: DimensionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "mlp")]
    head: HeadArg,
}

impl TrainingArgs {
    fn config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: effective_seed(self.seed)?,
            head: match self.head {
                HeadArg::Mlp => HeadKind::Mlp,
                HeadArg::Linear => HeadKind::Linear,
            },
            ..TrainConfig::default()
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `auto` runs layer selection on the training split; a number fixes it.
    #[arg(long, default_value = "auto")]
    layer: String,
    #[arg(long, value_enum, default_value = "overall")]
    dimension: DimensionArg,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    saliency: SaliencyArgs,
    /// Output directory for `probe-<dimension>.eppm` and `train-report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Probe model file; repeat for several dimensions.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Fit a four-parameter logistic before PLCC.
    #[arg(long)]
    plcc_logistic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LabelSource {
    /// MOS document from `mos`.
    #[arg(long, conflicts_with = "manifest")]
    mos: Option<PathBuf>,
    /// Manifest carrying MOS labels (and split labels).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl LabelSource {
    fn load(&self) -> Result<(BTreeMap<String, MosLabels>, Option<Manifest>)> {
        match (&self.mos, &self.manifest) {
            (Some(p), _) => Ok((MosDocument::read_file(p)?.labels(), None)),
            (None, Some(p)) => {
                let m = Manifest::read_file(p)?;
                let labels = m
                    .samples
                    .iter()
                    .filter_map(|s| s.mos.map(|l| (s.id.clone(), l)))
                    .collect();
                Ok((labels, Some(m)))
            }
            (None, None) => Err(Error::Config("give --mos or --manifest for MOS labels".into())),
        }
    }

    fn load_optional(&self) -> Result<(Option<BTreeMap<String, MosLabels>>, Option<Manifest>)> {
        if self.mos.is_none() && self.manifest.is_none() {
            return Ok((None, None));
        }
        let (l, m) = self.load()?;
        Ok((Some(l), m))
    }
}

#[derive(Args, Debug)]
struct BaselineArgs {
    /// Samples directory (samples.json, source/, edited/).
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    labels: LabelSource,
    #[arg(long, default_value_t = 11)]
    ssim_window: usize,
    #[arg(long, default_value_t = 1.5)]
    ssim_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BackboneArgs {
    /// JSON backbone configuration; defaults to the built-in toy model.
    #[arg(long)]
    backbone_config: Option<PathBuf>,
    /// Seed of the backbone weights.
    #[arg(long)]
    backbone_seed: Option<u64>,
}

impl BackboneArgs {
    fn build(&self) -> Result<Backbone> {
        let mut cfg = match &self.backbone_config {
            Some(p) => read_json::<BackboneConfig>(p)?,
            None => BackboneConfig::default(),
        };
        cfg.seed = effective_seed(self.backbone_seed.unwrap_or(cfg.seed))?;
        Backbone::new(cfg)
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    labels: LabelSource,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
    /// Output directory for `hidden.ephs` and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AdapterPlacement {
    All,
    Vision,
    Language,
    None,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    labels: LabelSource,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long, default_value = "auto")]
    layer: String,
    #[arg(long, value_enum, default_value = "overall")]
    dimension: DimensionArg,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    saliency: SaliencyArgs,
    #[arg(long, value_enum, default_value = "all")]
    adapters: AdapterPlacement,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    /// Average rank reached by budget pruning.
    #[arg(long, default_value_t = 8)]
    target_rank: usize,
    /// Fixed-rank adapters: no pruning, no orthogonality penalty.
    #[arg(long)]
    plain_lora: bool,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
    /// Output directory for `finetune-<dimension>.eppm` and `finetune-report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Mos(a) => mos_cmd(a),
        Command::Layers(a) => layers(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Extract(a) => extract(a),
        Command::Finetune(a) => finetune(a),
        Command::ValidateDump(a) => validate_dump(a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Default => SynthConfig::default(),
        Preset::Noiseless => SynthConfig::noiseless(),
        Preset::Nonlinear => SynthConfig::nonlinear(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => { $(if let Some(v) = $arg { cfg.$field = v; })* };
    }
    set!(n_samples <- a.samples, n_subjects <- a.subjects, num_layers <- a.layers, dim <- a.dim,
         signal <- a.signal, rating_noise <- a.rating_noise, feature_noise <- a.feature_noise);
    if a.planted_layer.is_some() {
        cfg.planted_layer = a.planted_layer;
    }
    cfg.seed = effective_seed(a.seed)?;
    let bench = build_benchmark(&cfg)?;
    bench.write(&a.out, a.images)?;
    info!(
        "wrote {} samples, {} ratings to {}",
        bench.data.ids.len(),
        bench.data.ratings.len(),
        a.out.display()
    );
    Ok(())
}

fn mos_cmd(a: MosArgs) -> Result<()> {
    let records = mos::read_ratings_file(&a.ratings)?;
    let config = MosConfig {
        rejection_threshold: a.threshold,
    };
    if !(0.0..=1.0).contains(&config.rejection_threshold) {
        return Err(Error::Config(format!(
            "threshold must lie in [0, 1], got {}",
            a.threshold
        )));
    }
    let outcome = mos::process(&records, &config)?;
    let doc = MosDocument::from_outcome(&outcome, Reproducibility::new("mos", 0, &config)?);
    info!(
        "{} samples, {} subject(s) rejected",
        doc.samples.len(),
        doc.screening.rejected_subjects.len()
    );
    doc.write_file(&a.out)
}

#[derive(Serialize)]
struct LayersDocument {
    dimension: Target,
    n_train: usize,
    stats: LayerStats,
    reproducibility: Reproducibility,
}

fn load_data(d: &DataArgs) -> Result<LabeledDump> {
    LabeledDump::load(&d.dump, &d.manifest, d.mos.as_deref(), effective_seed(d.split_seed)?)
}

fn layers(a: LayersArgs) -> Result<()> {
    let target = a.dimension.single()?;
    let cfg = a.saliency.config();
    cfg.validate()?;
    let ds = load_data(&a.data)?;
    let stats = crate::pipeline::select_layer(&ds, target, &cfg)?;
    info!("selected layer {}", stats.selected);
    let doc = LayersDocument {
        dimension: target,
        n_train: ds.split.train.len(),
        stats,
        reproducibility: Reproducibility::new("layers", effective_seed(a.data.split_seed)?, &cfg)?,
    };
    write_json(&a.out, &doc)
}

#[derive(Serialize)]
struct TrainDocument {
    runs: Vec<ProbeRun>,
    models: Vec<PathBuf>,
    config: TrainConfig,
    saliency: SaliencyConfig,
    reproducibility: Reproducibility,
}

fn model_file_name(prefix: &str, t: Target) -> String {
    format!("{prefix}-{}.eppm", t.as_str())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let layer: LayerChoice = a.layer.parse()?;
    let tc = a.training.config()?;
    tc.validate()?;
    let sc = a.saliency.config();
    sc.validate()?;
    let ds = load_data(&a.data)?;
    ensure_dir(&a.out)?;
    let mut runs = Vec::new();
    let mut models = Vec::new();
    for target in a.dimension.targets() {
        let run = train_probe(&ds, target, layer, &tc, &sc)?;
        info!(
            "{}: layer {}, best epoch {}",
            target.as_str(),
            run.layer,
            run.report.best_epoch
        );
        let path = a.out.join(model_file_name("probe", target));
        write_model_file(&path, &run.model)?;
        models.push(PathBuf::from(model_file_name("probe", target)));
        runs.push(run);
    }
    let reproducibility = Reproducibility::new("train", tc.seed, &(&tc, &sc, a.layer.as_str()))?;
    write_json(
        &a.out.join("train-report.json"),
        &TrainDocument {
            runs,
            models,
            config: tc,
            saliency: sc,
            reproducibility,
        },
    )
}

#[derive(Serialize)]
struct ModelSummary {
    file: String,
    target: Target,
    layer: usize,
}

#[derive(Serialize)]
struct EvalDocument {
    split: EvalSplit,
    n: usize,
    models: Vec<ModelSummary>,
    report: CorrelationReport,
    reproducibility: Reproducibility,
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let split = match a.split {
        SplitArg::Train => EvalSplit::Train,
        SplitArg::Val => EvalSplit::Val,
        SplitArg::Test => EvalSplit::Test,
        SplitArg::All => EvalSplit::All,
    };
    let models = a
        .models
        .iter()
        .map(|p| read_model_file(p))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&models, &ds, split, a.plcc_logistic)?;
    let summaries = a
        .models
        .iter()
        .zip(&models)
        .map(|(p, m)| ModelSummary {
            file: p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
            target: m.target,
            layer: m.layer,
        })
        .collect::<Vec<_>>();
    let seed = effective_seed(a.data.split_seed)?;
    let reproducibility = Reproducibility::new("eval", seed, &(split, a.plcc_logistic, seed))?;
    write_json(
        &a.out,
        &EvalDocument {
            split,
            n: split.positions(&ds).len(),
            models: summaries,
            report,
            reproducibility,
        },
    )
}

#[derive(Serialize)]
struct BaselineDocument {
    #[serde(flatten)]
    report: BaselineReport,
    ssim: SsimConfig,
    reproducibility: Reproducibility,
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let (labels, _) = a.labels.load()?;
    let samples = load_samples_dir(&a.samples)?;
    let pairs: Vec<_> = samples
        .into_iter()
        .map(|(id, s)| (id, s.source, s.edited))
        .collect();
    let cfg = SsimConfig {
        window: a.ssim_window,
        sigma: a.ssim_sigma,
        ..SsimConfig::default()
    };
    let report = baseline_report(&pairs, &labels, &cfg)?;
    let reproducibility = Reproducibility::new("baseline", 0, &cfg)?;
    write_json(
        &a.out,
        &BaselineDocument {
            report,
            ssim: cfg,
            reproducibility,
        },
    )
}

fn split_for(ids: &[String], manifest: Option<&Manifest>, seed: u64) -> Result<Split> {
    if let Some(m) = manifest {
        if let Some(labels) = m.split_labels() {
            let by_id: BTreeMap<&str, _> = m.samples.iter().map(|s| s.id.as_str()).zip(labels).collect();
            if let Some(found) = ids.iter().map(|id| by_id.get(id.as_str()).copied()).collect::<Option<Vec<_>>>() {
                return Ok(Split::from_labels(&found));
            }
        }
    }
    Ok(Split::by_id_hash(ids, seed))
}

fn extract(a: ExtractArgs) -> Result<()> {
    let (labels, manifest_in) = a.labels.load_optional()?;
    let backbone = a.backbone.build()?;
    let samples = load_samples_dir(&a.samples)?;
    let dump = backbone_dump(&backbone, &samples)?;
    let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
    let seed = effective_seed(a.split_seed)?;
    let split = split_for(&ids, manifest_in.as_ref(), seed)?.labels(ids.len());
    let entries = ids
        .iter()
        .zip(split)
        .map(|(id, split)| ManifestSample {
            id: id.clone(),
            mos: labels.as_ref().and_then(|l| l.get(id).copied()),
            split: Some(split),
        })
        .collect();
    let cfg = backbone.config();
    let mut manifest = Manifest::new(
        cfg.depth,
        cfg.d_model,
        Provenance {
            kind: ProvenanceKind::Toy,
            backbone: format!("toy-{}", &config_hash(cfg)?[..12]),
        },
        entries,
    );
    manifest.config = serde_json::to_value(cfg)?;
    manifest.reproducibility = Some(Reproducibility::new("extract", cfg.seed, cfg)?);
    ensure_dir(&a.out)?;
    dump.write_file(&a.out.join(crate::io::synth::DUMP_FILE))?;
    manifest.write_file(&a.out.join(crate::io::synth::MANIFEST_FILE))
}

#[derive(Serialize)]
struct FinetuneRun {
    target: Target,
    layer: usize,
    layer_stats: Option<LayerStats>,
    report: TrainReport,
    test: CorrelationCell,
    adapter_parameters: usize,
    average_active_rank: Option<f64>,
}

#[derive(Serialize)]
struct FinetuneDocument {
    runs: Vec<FinetuneRun>,
    models: Vec<PathBuf>,
    backbone: BackboneConfig,
    adapters: Option<AdapterConfig>,
    train: TrainConfig,
    reproducibility: Reproducibility,
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let layer_choice: LayerChoice = a.layer.parse()?;
    let tc = a.training.config()?;
    tc.validate()?;
    let sc = a.saliency.config();
    sc.validate()?;
    let (labels, manifest) = a.labels.load()?;
    let backbone = a.backbone.build()?;
    let samples: Vec<(String, EditSample)> = load_samples_dir(&a.samples)?
        .into_iter()
        .filter(|(id, _)| labels.contains_key(id))
        .collect();
    if samples.is_empty() {
        return Err(Error::Data("no sample in the directory has MOS labels".into()));
    }
    let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
    let split = split_for(&ids, manifest.as_ref(), effective_seed(a.split_seed)?)?;

    let adapters = match a.adapters {
        AdapterPlacement::None => None,
        placement => {
            let mut ac = AdapterConfig {
                rank: a.rank,
                seed: tc.seed,
                targets: vec![match placement {
                    AdapterPlacement::Vision => "vision",
                    AdapterPlacement::Language => "language",
                    _ => "all",
                }
                .into()],
                ..AdapterConfig::default()
            };
            if a.plain_lora {
                ac = ac.plain_lora();
            }
            ac.validate()?;
            Some(ac)
        }
    };
    let fc = FinetuneConfig {
        train: tc.clone(),
        adapters: adapters.clone(),
        prune_to: (!a.plain_lora).then_some(a.target_rank),
    };

    let depth = backbone.config().depth;
    let mut auto_stats = BTreeMap::new();
    if layer_choice == LayerChoice::Auto {
        let train_samples: Vec<(String, EditSample)> = split.train.iter().map(|&i| samples[i].clone()).collect();
        let dump = backbone_dump(&backbone, &train_samples)?;
        let layers = (1..=depth).map(|l| dump.pooled_all(l)).collect::<Result<Vec<_>>>()?;
        for target in a.dimension.targets() {
            let y = train_samples.iter().map(|(id, _)| labels[id].target(target)).collect();
            auto_stats.insert(target, analyze(&LayerFeatureSet::new(layers.clone(), y)?, &sc)?);
        }
    }

    ensure_dir(&a.out)?;
    let labeled = |rows: &[usize], t: Target| -> Vec<LabeledSample> {
        rows.iter()
            .map(|&i| LabeledSample {
                id: samples[i].0.clone(),
                sample: samples[i].1.clone(),
                target: labels[&samples[i].0].target(t),
            })
            .collect()
    };
    let mut runs = Vec::new();
    let mut models = Vec::new();
    for target in a.dimension.targets() {
        let (layer, layer_stats) = match layer_choice {
            LayerChoice::Auto => {
                let s = auto_stats.remove(&target).expect("stats computed for every target");
                (s.selected, Some(s))
            }
            LayerChoice::Fixed(k) if k <= depth => (k, None),
            LayerChoice::Fixed(k) => {
                return Err(Error::Config(format!("layer {k} outside 1..={depth}")));
            }
        };
        let train_set = labeled(&split.train, target);
        let val_set = labeled(&split.val, target);
        let (model, report) = finetune_end_to_end(&backbone, &train_set, &val_set, layer, target, &fc)?;
        let test_set = labeled(&split.test, target);
        let refs: Vec<&EditSample> = test_set.iter().map(|s| &s.sample).collect();
        let feats = extract_features(&backbone, &refs, layer, model.adapters.as_ref())?;
        let pred = model.predict_batch(&feats)?;
        let y: Vec<f64> = test_set.iter().map(|s| s.target).collect();
        let test = CorrelationCell::compute(&pred, &y, false);
        info!("{}: layer {layer}, test SRCC {:?}", target.as_str(), test.srcc);
        let path = a.out.join(model_file_name("finetune", target));
        write_model_file(&path, &model)?;
        models.push(PathBuf::from(model_file_name("finetune", target)));
        runs.push(FinetuneRun {
            target,
            layer,
            layer_stats,
            report,
            test,
            adapter_parameters: model.adapters.as_ref().map_or(0, |s| s.parameter_count()),
            average_active_rank: model.adapters.as_ref().map(|s| s.average_active_rank()),
        });
    }
    let reproducibility = Reproducibility::new(
        "finetune",
        tc.seed,
        &(&tc, &adapters, backbone.config(), a.layer.as_str()),
    )?;
    write_json(
        &a.out.join("finetune-report.json"),
        &FinetuneDocument {
            runs,
            models,
            backbone: *backbone.config(),
            adapters,
            train: tc,
            reproducibility,
        },
    )
}

#[derive(Serialize)]
struct ValidateDocument {
    valid: bool,
    header: DumpHeader,
    manifest_aligned: Option<bool>,
    reproducibility: Reproducibility,
}

fn validate_dump(a: ValidateArgs) -> Result<()> {
    let bytes = std::fs::read(&a.dump).map_err(|e| Error::io(&a.dump, e))?;
    let header = DumpHeader::parse(&bytes)?;
    let dump = HiddenDump::from_bytes(&bytes)?;
    let manifest_aligned = match &a.manifest {
        Some(p) => {
            let m = Manifest::read_file(p)?;
            check_alignment(&m, &dump)?;
            Some(true)
        }
        None => None,
    };
    let doc = ValidateDocument {
        valid: true,
        header,
        manifest_aligned,
        reproducibility: Reproducibility::new("validate-dump", 0, &header)?,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["editprobe", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["editprobe"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["editprobe", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_dump_is_data_error() {
        assert_eq!(
            run(["editprobe", "validate-dump", "--dump", "/nonexistent/x.ephs"]),
            EXIT_DATA
        );
    }
}
