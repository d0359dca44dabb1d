//! `microevo`: generate digital libraries, train and evaluate surrogate
//! models, and export frames.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use microevo::eval::{self, EvalReport, GroundTruthStub, PersistenceStub};
use microevo::fcg::{build_fcg_library, FcgLibrarySpec};
use microevo::field::{load_library, save_library, sha256_hex, split_library, DigitalLibrary, Field2D, WindowedDataset};
use microevo::models::{
    build_model, load_model, rollout_autoregressive, save_model, train, Family, Model, ModelSpec, Predictor, Refeed, TrainConfig,
};
use microevo::nn::set_deterministic;
use microevo::turing::{build_turing_library, GrayScottParams, TuringLibrarySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Dataset {
    Fcg,
    Turing,
}

impl Dataset {
    fn name(self) -> &'static str {
        match self {
            Self::Fcg => "fcg",
            Self::Turing => "turing",
        }
    }

    /// `(in_len, out_len, n_train)`
    fn defaults(self) -> (usize, usize, usize) {
        match self {
            Self::Fcg => (3, 1, 800),
            Self::Turing => (10, 10, 10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Stub {
    GroundTruth,
    Persistence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum RefeedChoice {
    Auto,
    Raw,
    Threshold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    family: Family,
    dataset: Dataset,
    in_len: Option<usize>,
    out_len: Option<usize>,
    /// Defaults to 300 on FCG and 100 on Turing.
    epochs: Option<usize>,
    batch_size: usize,
    lr: f64,
    train_samples: Option<usize>,
    shuffle_split: bool,
    eval_every: usize,
    checkpoint_every: usize,
    target_loss: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            family: Family::BaseSnn,
            dataset: Dataset::Fcg,
            in_len: None,
            out_len: None,
            epochs: None,
            batch_size: t.batch_size,
            lr: t.lr,
            train_samples: None,
            shuffle_split: false,
            eval_every: 0,
            checkpoint_every: 0,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    horizon: Option<usize>,
    refeed: RefeedChoice,
    threshold: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { horizon: None, refeed: RefeedChoice::Auto, threshold: 0.5 }
    }
}

/// Everything a run depends on; written next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    seed: u64,
    deterministic: bool,
    threads: usize,
    out: PathBuf,
    turing: TuringLibrarySpec,
    gray_scott: GrayScottParams,
    fcg: FcgLibrarySpec,
    train: TrainSection,
    eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            threads: 1,
            out: PathBuf::from("out"),
            turing: TuringLibrarySpec::default(),
            gray_scott: GrayScottParams::default(),
            fcg: FcgLibrarySpec::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Config {
    fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of every setting except the output directory.
    fn hash(&self) -> String {
        let placed = Config { out: PathBuf::new(), ..self.clone() };
        sha256_hex(placed.to_toml().as_bytes())
    }

    fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    fn library_dir(&self, d: Dataset) -> PathBuf {
        self.out.join("libraries").join(d.name())
    }

    fn windows(&self) -> (usize, usize) {
        let (i, o, _) = self.train.dataset.defaults();
        (self.train.in_len.unwrap_or(i), self.train.out_len.unwrap_or(o))
    }

    fn refeed(&self, family: Option<Family>) -> Refeed {
        match self.eval.refeed {
            RefeedChoice::Raw => Refeed::Raw,
            RefeedChoice::Threshold => Refeed::Threshold(self.eval.threshold),
            RefeedChoice::Auto => match family {
                Some(f) => Refeed::default_for(f, self.train.dataset == Dataset::Fcg),
                None => Refeed::Raw,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "microevo", version, about = "Digital libraries and neural surrogates of microstructure evolution")]
struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (libraries/, checkpoints/, reports/, exports/).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded fixed-order accumulation and no timestamps.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the Gray-Scott library.
    GenTuring {
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Generate the fatigue-crack-growth library.
    GenFcg {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model family on a library's training split.
    Train {
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, value_enum)]
        dataset: Option<Dataset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        train_samples: Option<usize>,
    },
    /// Score a checkpoint or a stub predictor on the held-out split.
    Eval {
        #[arg(long, conflicts_with = "stub", required_unless_present = "stub")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        stub: Option<Stub>,
        #[arg(long, value_enum)]
        dataset: Option<Dataset>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long, value_enum)]
        refeed: Option<RefeedChoice>,
    },
    /// Autoregressive rollout of one held-out sample, written as PGM frames.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        dataset: Option<Dataset>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long, value_enum)]
        refeed: Option<RefeedChoice>,
    },
    /// Parameter counts, memory and weight statistics of a model.
    Analyze {
        #[arg(long, conflicts_with = "family", required_unless_present = "family")]
        checkpoint: Option<PathBuf>,
        /// Analyze a freshly initialized model of this family.
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, value_enum)]
        dataset: Option<Dataset>,
    },
    /// Write the frames of one library sample as PGM images.
    ExportFrames {
        #[arg(long, value_enum)]
        dataset: Option<Dataset>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg: Config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.turing.base_seed = cfg.seed;
    cfg.fcg.base_seed = cfg.seed;
    match &cli.command {
        Command::GenTuring { sequences, frames, height, width } => {
            set(&mut cfg.turing.n_sequences, *sequences);
            set(&mut cfg.turing.frames_per_sequence, *frames);
            set(&mut cfg.gray_scott.height, *height);
            set(&mut cfg.gray_scott.width, *width);
        }
        Command::GenFcg { samples } => set(&mut cfg.fcg.n_samples, *samples),
        Command::Train { family, dataset, epochs, batch_size, lr, train_samples } => {
            set(&mut cfg.train.family, *family);
            set(&mut cfg.train.dataset, *dataset);
            cfg.train.epochs = epochs.or(cfg.train.epochs);
            set(&mut cfg.train.batch_size, *batch_size);
            set(&mut cfg.train.lr, *lr);
            cfg.train.train_samples = train_samples.or(cfg.train.train_samples);
        }
        Command::Eval { dataset, horizon, train_samples, refeed, .. } => {
            set(&mut cfg.train.dataset, *dataset);
            cfg.eval.horizon = horizon.or(cfg.eval.horizon);
            cfg.train.train_samples = train_samples.or(cfg.train.train_samples);
            set(&mut cfg.eval.refeed, *refeed);
        }
        Command::Rollout { dataset, steps, train_samples, refeed, .. } => {
            set(&mut cfg.train.dataset, *dataset);
            cfg.eval.horizon = steps.or(cfg.eval.horizon);
            cfg.train.train_samples = train_samples.or(cfg.train.train_samples);
            set(&mut cfg.eval.refeed, *refeed);
        }
        Command::Analyze { family, dataset, .. } => {
            set(&mut cfg.train.family, *family);
            set(&mut cfg.train.dataset, *dataset);
        }
        Command::ExportFrames { dataset, .. } => set(&mut cfg.train.dataset, *dataset),
    }
    ensure!(cfg.threads > 0, "threads must be positive");
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write_library(cfg: &Config, dataset: Dataset, mut lib: DigitalLibrary) -> Result<()> {
    if !cfg.deterministic {
        let m = lib.manifest().clone().stamped_now();
        *lib.manifest_mut() = m;
    }
    let dir = cfg.library_dir(dataset);
    save_library(&lib, &dir)?;
    let back = load_library(&dir)?;
    ensure!(back.content_hash() == lib.content_hash(), "library at {} failed to round-trip", dir.display());
    cfg.persist(&dir)?;
    let (t, h, w) = lib.frame_dims().unwrap_or_default();
    println!("wrote {} samples of {t}x{h}x{w} to {} (hash {})", lib.len(), dir.display(), lib.content_hash());
    let events = &lib.manifest().events;
    if !events.is_empty() {
        println!("{} generation events recorded in manifest.json", events.len());
    }
    Ok(())
}

/// Train/test split of the configured dataset.
fn split(cfg: &Config) -> Result<(DigitalLibrary, DigitalLibrary)> {
    let dir = cfg.library_dir(cfg.train.dataset);
    let lib = load_library(&dir).with_context(|| format!("loading library {}", dir.display()))?;
    let n_train = cfg.train.train_samples.unwrap_or(cfg.train.dataset.defaults().2);
    Ok(split_library(&lib, n_train, cfg.seed, cfg.train.shuffle_split)?)
}

fn model_spec(cfg: &Config, family: Family, grid: (usize, usize)) -> ModelSpec {
    let (i, o) = cfg.windows();
    ModelSpec::new(family, grid, i, o)
}

fn check_grid(model: &Model, lib: &DigitalLibrary) -> Result<()> {
    let (_, h, w) = lib.frame_dims().context("empty library")?;
    ensure!(model.spec.grid == (h, w), "model grid {:?} does not match library frames {h}x{w}", model.spec.grid);
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn cmd_train(cfg: &Config) -> Result<()> {
    let (train_lib, test_lib) = split(cfg)?;
    let (_, h, w) = train_lib.frame_dims().context("empty library")?;
    let family = cfg.train.family;
    let mut model = build_model(&model_spec(cfg, family, (h, w)), cfg.seed)?;
    let (i, o) = cfg.windows();
    let data = WindowedDataset::from_library(&train_lib, i, o, 1)?;
    let held_out = if cfg.train.eval_every > 0 { Some(WindowedDataset::from_library(&test_lib, i, o, 1)?) } else { None };
    let dir = cfg.out.join("checkpoints").join(format!("{}_{}", family.name(), cfg.train.dataset.name()));
    let tc = TrainConfig {
        epochs: cfg.train.epochs.unwrap_or(match cfg.train.dataset {
            Dataset::Fcg => 300,
            Dataset::Turing => 100,
        }),
        batch_size: cfg.train.batch_size,
        seed: cfg.seed,
        lr: cfg.train.lr,
        eval_every: cfg.train.eval_every,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: Some(dir.clone()),
        target_loss: cfg.train.target_loss,
        threads: cfg.threads,
        ..TrainConfig::default()
    };
    println!("training {family} ({} parameters) on {} windows", model.param_count(), data.len());
    let report = train(&mut model, &data, &tc, held_out.as_ref())?;
    if report.history.is_empty() {
        save_model(&dir, &model)?;
    }
    let back = load_model(&dir)?;
    ensure!(back.store == model.store, "checkpoint at {} failed to round-trip", dir.display());
    cfg.persist(&dir)?;
    if let Some(last) = report.history.last() {
        println!("epoch {} train loss {:.6e}", last.epoch, last.train_loss);
    }
    println!("wrote {} (hash {})", dir.display(), eval::checkpoint_hash(&model));
    Ok(())
}

fn write_report(cfg: &Config, dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("eval.json"), report.to_json())?;
    fs::write(dir.join("curves.csv"), report.curves_csv())?;
    if let Some(w) = &report.weights {
        fs::write(dir.join("histogram.csv"), eval::histogram_csv(w))?;
    }
    cfg.persist(dir)?;
    let back: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join("eval.json"))?)?;
    ensure!(back.per_step_mae.len() == report.per_step_mae.len(), "report at {} failed to round-trip", dir.display());
    Ok(())
}

fn horizon(cfg: &Config, test: &DigitalLibrary, in_len: usize) -> Result<usize> {
    let (t, _, _) = test.frame_dims().context("empty test split")?;
    let h = cfg.eval.horizon.unwrap_or(t.saturating_sub(in_len));
    ensure!(h > 0 && in_len + h <= t, "horizon {h} does not fit {t}-frame sequences after {in_len} seed frames");
    Ok(h)
}

fn cmd_eval(cfg: &Config, checkpoint: Option<&Path>, stub: Option<Stub>) -> Result<()> {
    let (_, test) = split(cfg)?;
    let (i, o) = cfg.windows();
    let (name, predictor, model): (String, Box<dyn Predictor>, Option<Model>) = match (checkpoint, stub) {
        (Some(p), _) => {
            let m = load_model(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            check_grid(&m, &test)?;
            (dir_name(p), Box::new(m.clone()), Some(m))
        }
        (None, Some(Stub::GroundTruth)) => {
            ("ground-truth".into(), Box::new(GroundTruthStub { sequences: test.samples().to_vec(), in_len: i, out_len: o }), None)
        }
        (None, Some(Stub::Persistence)) => ("persistence".into(), Box::new(PersistenceStub { in_len: i, out_len: o }), None),
        (None, None) => bail!("need --checkpoint or --stub"),
    };
    let refeed = cfg.refeed(model.as_ref().map(|m| m.spec.family));
    let h = horizon(cfg, &test, predictor.in_len())?;
    let mut report = eval::evaluate(predictor.as_ref(), &name, model.as_ref(), &test, h, refeed, refeed)?;
    report.config_hash = Some(cfg.hash());
    let dir = cfg.out.join("reports").join(format!("eval_{name}"));
    write_report(cfg, &dir, &report)?;
    println!(
        "{name}: one-step MAE {:.6e} (persistence {:.6e}), final cumulative MAE {:.6e} over {h} steps",
        report.one_step_mae,
        report.persistence_one_step_mae,
        report.cumulative_mae.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn write_pgms(dir: &Path, prefix: &str, frames: &[&Field2D]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, f) in frames.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{k:03}.pgm"));
        let bytes = f.to_pgm();
        fs::write(&path, &bytes)?;
        ensure!(fs::metadata(&path)?.len() == bytes.len() as u64, "short write to {}", path.display());
    }
    Ok(())
}

fn cmd_rollout(cfg: &Config, checkpoint: &Path, sample: usize) -> Result<()> {
    let (_, test) = split(cfg)?;
    let model = load_model(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    check_grid(&model, &test)?;
    let seq = test.samples().get(sample).with_context(|| format!("test split has {} samples", test.len()))?;
    let n = model.spec.in_len;
    let h = horizon(cfg, &test, n)?;
    let refeed = cfg.refeed(Some(model.spec.family));
    let seeds: Vec<&Field2D> = (0..n).map(|k| seq.frame(k)).collect();
    let preds = rollout_autoregressive(&model, &seeds, h, refeed)?;
    let dir = cfg.out.join("exports").join(format!("rollout_{}_{sample:05}", dir_name(checkpoint)));
    write_pgms(&dir, "pred", &preds.iter().collect::<Vec<_>>())?;
    let truth: Vec<&Field2D> = (n..n + h).map(|k| seq.frame(k)).collect();
    write_pgms(&dir, "truth", &truth)?;
    let mut csv = String::from("step,mae\n");
    for (k, (p, t)) in preds.iter().zip(&truth).enumerate() {
        csv.push_str(&format!("{},{:.9e}\n", k + 1, eval::mae(&refeed.apply(p)?, t)?));
    }
    fs::write(dir.join("rollout.csv"), csv)?;
    cfg.persist(&dir)?;
    println!("wrote {h} predicted frames to {}", dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Analysis {
    family: Family,
    checkpoint_hash: String,
    config_hash: String,
    param_count: usize,
    layer_counts: Vec<(String, usize)>,
    flatten_size: Option<usize>,
    memory_model_bytes: u64,
    memory_pixel_bytes: u64,
    weights: eval::WeightStats,
    connectivity: eval::Connectivity,
}

fn cmd_analyze(cfg: &Config, checkpoint: Option<&Path>) -> Result<()> {
    let (model, name) = match checkpoint {
        Some(p) => (load_model(p).with_context(|| format!("loading checkpoint {}", p.display()))?, dir_name(p)),
        None => {
            let family = cfg.train.family;
            let base = match cfg.train.dataset {
                Dataset::Fcg => ModelSpec::fcg_default(family),
                Dataset::Turing => ModelSpec::turing_default(family),
            };
            let spec = model_spec(cfg, family, base.grid);
            (build_model(&spec, cfg.seed)?, format!("{}_{}_init", family.name(), cfg.train.dataset.name()))
        }
    };
    let (h, w) = model.spec.grid;
    let a = Analysis {
        family: model.spec.family,
        checkpoint_hash: eval::checkpoint_hash(&model),
        config_hash: cfg.hash(),
        param_count: model.param_count(),
        layer_counts: model.layer_counts(),
        flatten_size: model.flatten_size(),
        memory_model_bytes: eval::memory_model(eval::F32_BYTES, model.param_count() as u64),
        memory_pixel_bytes: eval::memory_pixel(eval::F32_BYTES, w as u64, h as u64),
        weights: eval::weight_statistics(&model),
        connectivity: eval::connectivity_density(&model, eval::DENSITY_THRESHOLD),
    };
    let dir = cfg.out.join("reports").join(format!("analyze_{name}"));
    fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&a)?;
    fs::write(dir.join("analysis.json"), &json)?;
    fs::write(dir.join("histogram.csv"), eval::histogram_csv(&a.weights))?;
    cfg.persist(&dir)?;
    let back: Analysis = serde_json::from_str(&fs::read_to_string(dir.join("analysis.json"))?)?;
    ensure!(back.param_count == a.param_count, "analysis at {} failed to round-trip", dir.display());
    println!(
        "{}: {} parameters ({:.2} kB), connectivity {:.4}",
        a.family,
        a.param_count,
        eval::kb(a.memory_model_bytes),
        a.connectivity.pooled
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_export(cfg: &Config, sample: usize) -> Result<()> {
    let dir = cfg.library_dir(cfg.train.dataset);
    let lib = load_library(&dir).with_context(|| format!("loading library {}", dir.display()))?;
    let seq = lib.samples().get(sample).with_context(|| format!("library has {} samples", lib.len()))?;
    let out = cfg.out.join("exports").join(format!("{}_sample_{sample:05}", cfg.train.dataset.name()));
    let frames: Vec<&Field2D> = seq.frames().iter().map(|f| f.as_ref()).collect();
    write_pgms(&out, "frame", &frames)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    set_deterministic(cfg.deterministic);
    match &cli.command {
        Command::GenTuring { .. } => {
            let lib = build_turing_library(&cfg.turing, &cfg.gray_scott)?;
            write_library(&cfg, Dataset::Turing, lib)
        }
        Command::GenFcg { .. } => {
            let lib = build_fcg_library(&cfg.fcg)?;
            write_library(&cfg, Dataset::Fcg, lib)
        }
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { checkpoint, stub, .. } => cmd_eval(&cfg, checkpoint.as_deref(), *stub),
        Command::Rollout { checkpoint, sample, .. } => cmd_rollout(&cfg, checkpoint, *sample),
        Command::Analyze { checkpoint, .. } => cmd_analyze(&cfg, checkpoint.as_deref()),
        Command::ExportFrames { sample, .. } => cmd_export(&cfg, *sample),
    }
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
