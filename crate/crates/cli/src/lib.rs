//! Subcommand implementations behind the `vah` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use vah_core::baselines::{identity_baseline, input_stems, stat_remix_baseline, StatRemixConfig};
use vah_core::context::ContextStream;
use vah_core::corpus::{
    build_corpus, build_corpus_from_scenes, list_scenes, scene_seed, synth_scene, write_scene, CorpusConfig,
    Difficulty, Manifest, SceneConfig, Split,
};
use vah_core::metrics::evaluate;
use vah_core::seed::sha256_hex;
use vah_core::wav;
use vah_model::checkpoint::checkpoint_config;
use vah_model::infer::{infer_file, infer_split};
use vah_model::{load_checkpoint, train, Error, ModelConfig, Preset, Result, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "vah", version, about = "Visually guided acoustic highlighting pipelines")]
pub struct Cli {
    /// Worker threads for clip-level work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize scenes: sources, ground-truth mix, context features.
    Synth(SynthArgs),
    /// Turn scenes into poorly mixed inputs, stems and a manifest.
    BuildCorpus(BuildArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Run a checkpoint on one file or on a corpus split.
    Infer(InferArgs),
    /// Score a directory of outputs against a corpus split.
    Eval(EvalArgs),
    /// Produce baseline outputs for a corpus split.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8000)]
    pub sr: u32,
    #[arg(long, default_value_t = 4)]
    pub seconds: usize,
    /// Overwrite existing output.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory of scenes written by `synth`.
    #[arg(long = "in", required_unless_present = "num", conflicts_with = "num")]
    pub input: Option<PathBuf>,
    /// Synthesize this many scenes in place instead of reading `--in`.
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long, default_value_t = 8000)]
    pub sr: u32,
    #[arg(long, default_value_t = 4)]
    pub seconds: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "random")]
    pub difficulty: String,
    #[arg(long, default_value_t = 0.1)]
    pub leakage: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub no_context: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single input file.
    #[arg(long, requires = "output")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub context_vid: Option<PathBuf>,
    #[arg(long)]
    pub context_text: Option<PathBuf>,
    /// Corpus whose split is processed when no single input is given.
    #[arg(long, conflicts_with = "input", requires = "out")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Warn when the checkpoint was trained with a different preset.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory holding `{clip_id}.wav` outputs.
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "system")]
    pub system: String,
    /// Report path (JSON); a CSV is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Identity,
    StatRemix,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

/// Exit status for an error: 2 config/input, 3 I/O, 4 numeric failure.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Format { .. } => 2,
        Error::Io { .. } => 3,
        Error::NonFinite { .. } => 4,
        Error::Core(vah_core::Error::Io { .. }) => 3,
        Error::Core(vah_core::Error::Internal(_)) => 4,
        Error::Core(_) => 2,
    }
}

/// Training settings as read from a JSON run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub no_context: bool,
    /// Replaces the preset's architecture entirely when present.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { preset: Preset::Desk, no_context: false, model: None, train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let cfg = self.model.clone().unwrap_or_else(|| ModelConfig::preset(self.preset));
        if self.no_context {
            cfg.without_context()
        } else {
            cfg
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serialises")
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("run config serialises").as_bytes())
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse::<Split>().map_err(Error::from)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

/// Refuses to write into a nonempty directory unless `force` is set.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if nonempty && !force {
            return Err(Error::Config(format!("{} exists and is not empty; pass --force to overwrite", dir.display())));
        }
        if nonempty {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        // Fails only if a pool already exists, which leaves the earlier setting in force.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::BuildCorpus(a) => build(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Baseline(a) => baseline_cmd(&a),
    }
}

#[derive(Serialize)]
struct SceneRow {
    index: usize,
    seed: u64,
    dir: String,
}

fn synth(a: &SynthArgs) -> Result<()> {
    use rayon::prelude::*;
    if a.num == 0 {
        return Err(Error::Config("--num must be positive".into()));
    }
    let cfg = SceneConfig { sample_rate: a.sr, seconds: a.seconds, ..SceneConfig::default() };
    // Validate before touching the output directory.
    synth_scene(scene_seed(a.seed, 0), &cfg)?;
    prepare_dir(&a.out, a.force)?;
    let rows = (0..a.num)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(a.seed, i);
            let dir = format!("scene_{i:05}");
            write_scene(&a.out.join(&dir), &synth_scene(seed, &cfg)?)?;
            Ok(SceneRow { index: i, seed, dir })
        })
        .collect::<Result<Vec<_>>>()?;
    let lines: String = rows.iter().map(|r| serde_json::to_string(r).expect("row serialises") + "\n").collect();
    write_file(&a.out.join("scenes.jsonl"), lines)?;
    log::info!("wrote {} scenes to {}", a.num, a.out.display());
    Ok(())
}

fn build(a: &BuildArgs) -> Result<()> {
    let difficulty: Difficulty = a.difficulty.parse()?;
    if !(0.0..0.5).contains(&a.leakage) {
        return Err(Error::Config(format!("leakage must lie in [0, 0.5), got {}", a.leakage)));
    }
    let scene = SceneConfig { sample_rate: a.sr, seconds: a.seconds, ..SceneConfig::default() };
    let cfg = CorpusConfig { seed: a.seed, difficulty, leakage: a.leakage, scene };
    let manifest = match (&a.input, a.num) {
        (Some(dir), _) => {
            let scenes = if dir.is_dir() { list_scenes(dir)? } else { Vec::new() };
            if scenes.is_empty() {
                return Err(Error::Config(format!("no scenes found in {}", dir.display())));
            }
            prepare_dir(&a.out, a.force)?;
            build_corpus_from_scenes(&scenes, &cfg, &a.out)?
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(Error::Config("--num must be positive".into()));
            }
            synth_scene(scene_seed(a.seed, 0), &cfg.scene)?;
            prepare_dir(&a.out, a.force)?;
            build_corpus(n, &cfg, &a.out)?
        }
        (None, None) => return Err(Error::Config("give --in or --num".into())),
    };
    log::info!("built {} clips in {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        rc.preset = p;
    }
    rc.no_context |= a.no_context;
    let t = &mut rc.train;
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch = a.batch.unwrap_or(t.batch);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    t.max_steps = a.max_steps.or(t.max_steps);
    let model_cfg = rc.model_config();
    model_cfg.validate()?;
    rc.train.validate()?;
    let manifest = Manifest::read(&a.corpus)?;
    prepare_dir(&a.out, a.force)?;
    log::info!("resolved run config (hash {}):\n{}", rc.hash(), rc.to_json());
    write_file(&a.out.join("run_config.json"), rc.to_json() + "\n")?;
    let (_, summary) = train(&manifest, &model_cfg, &rc.train, &a.out)?;
    log::info!(
        "trained {} steps; best validation loss {:.5}; checkpoint {}",
        summary.steps,
        summary.best_val,
        summary.best_checkpoint.display()
    );
    Ok(())
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let (cfg, hash) = checkpoint_config(&a.checkpoint)?;
    if let Some(p) = a.preset {
        let requested = ModelConfig::preset(p);
        let requested = if cfg.uses_context() { requested } else { requested.without_context() };
        if requested.hash() != hash {
            log::warn!("checkpoint config hash {hash} differs from the {p:?} preset ({})", requested.hash());
        }
    }
    let model = load_checkpoint(&a.checkpoint)?;
    if let (Some(input), Some(output)) = (&a.input, &a.output) {
        prepare_file(output, a.force)?;
        let mut contexts: Vec<(ContextStream, &Path)> = Vec::new();
        if let Some(p) = &a.context_vid {
            contexts.push((ContextStream::Vision, p));
        }
        if let Some(p) = &a.context_text {
            contexts.push((ContextStream::Text, p));
        }
        infer_file(&model, input, &contexts, output)?;
        return Ok(());
    }
    let (Some(corpus), Some(out)) = (&a.corpus, &a.out) else {
        return Err(Error::Config("give either --input/--output or --corpus/--out".into()));
    };
    let manifest = Manifest::read(corpus)?;
    let split = parse_split(&a.split)?;
    prepare_dir(out, a.force)?;
    let n = infer_split(&model, &manifest, split, out)?;
    log::info!("wrote {n} outputs to {}", out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let manifest = Manifest::read(&a.corpus)?;
    let split = parse_split(&a.split)?;
    let csv = a.report.with_extension("csv");
    prepare_file(&a.report, a.force)?;
    prepare_file(&csv, a.force)?;
    let report = evaluate(&manifest, split, &a.outputs, &a.system)?;
    write_file(&a.report, report.to_json())?;
    write_file(&csv, report.to_csv())?;
    match &report.mean_x100 {
        Some(m) => log::info!(
            "{} on {} clips (x100): MAG {:.3} ENV {:.3} KLD {:.3} dIB {:.3} W-dis {:.3}",
            a.system,
            report.clip_count,
            m.mag,
            m.env,
            m.kld_proxy,
            m.delta_ib_proxy,
            m.w_dis
        ),
        None => log::warn!("no clip could be scored"),
    }
    if report.failed_count > 0 {
        log::warn!("{} clips failed to score", report.failed_count);
    }
    Ok(())
}

fn baseline_cmd(a: &BaselineArgs) -> Result<()> {
    let manifest = Manifest::read(&a.corpus)?;
    let split = parse_split(&a.split)?;
    prepare_dir(&a.out, a.force)?;
    let cfg = StatRemixConfig { seed: a.seed, ..StatRemixConfig::default() };
    let mut n = 0;
    for record in manifest.split(split) {
        let out = match a.method {
            Method::Identity => identity_baseline(&record.load_input(&manifest.root)?),
            Method::StatRemix => {
                let clip = record.load(&manifest.root)?;
                let stems = input_stems(&clip.separated, &record.adjustment)?;
                stat_remix_baseline(&clip.input, &stems, &cfg, &record.clip_id)?.output
            }
        };
        wav::write_f32(a.out.join(format!("{}.wav", record.clip_id)), &out)?;
        n += 1;
    }
    log::info!("wrote {n} {:?} outputs to {}", a.method, a.out.display());
    Ok(())
}
