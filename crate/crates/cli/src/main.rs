//! `shakti`: initialize, run, benchmark, quantize and train desk-scale models.
//!
//! Machine-readable results go to stdout as JSON lines; diagnostics go to
//! stderr.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use shakti_core::bench::{bench, BenchOptions, DEFAULT_GEN_TOKENS, DEFAULT_PROMPT_TOKENS, DEFAULT_REPEATS};
use shakti_core::corpus::{CorpusKind, SyntheticCorpus};
use shakti_core::model::{init_model, param_count, Model, ModelConfig, SamplingMode};
use shakti_core::persist::{encoded_len, load_checkpoint, save_checkpoint, AnyModel, Storage};
use shakti_core::quant::{predicted_size, quantize_model, QFormat};
use shakti_core::tokenizer::{ByteTokenizer, Tokenizer};
use shakti_core::train::gradcheck::SUITE_OPS;
use shakti_core::train::{
    gradcheck_suite, train_loop, DpoObjective, HyperProfile, LmObjective, PreferencePair, Stage, StepRecord,
};
use shakti_core::{Rng, Width};

/// Files above this size trigger a warning before they are written.
const LARGE_FILE_BYTES: u64 = 1 << 30;

#[derive(Parser)]
#[command(name = "shakti", version, about = "Desk-scale decoder-only language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 2 layers, dim 64, byte vocabulary.
    Toy,
    /// The full 2.5B-parameter configuration.
    Table1,
}

#[derive(Clone, Copy, ValueEnum)]
enum WidthArg {
    F32,
    F64,
}

impl From<WidthArg> for Width {
    fn from(w: WidthArg) -> Self {
        match w {
            WidthArg::F32 => Width::F32,
            WidthArg::F64 => Width::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Q4b,
    Q5b,
}

impl From<FormatArg> for QFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Q4b => QFormat::Q4B,
            FormatArg::Q5b => QFormat::Q5B,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Cpt,
    Sft,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusArg {
    Copy,
    Repeat,
}

#[derive(clap::Args)]
struct ConfigSource {
    /// Model configuration JSON file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration, used when --config is absent.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
}

impl ConfigSource {
    fn load(&self) -> Result<ModelConfig> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ModelConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
            }
            None => Ok(match self.preset {
                Preset::Toy => ModelConfig::toy(),
                Preset::Table1 => ModelConfig::table1(),
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Create a randomly initialized checkpoint.
    Init {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
        /// Print the parameter count and file size without writing.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, value_enum, default_value = "f32")]
        width: WidthArg,
    },
    /// Generate text from a prompt.
    Generate {
        model: PathBuf,
        #[arg(long, value_parser = clap::builder::NonEmptyStringValueParser::new())]
        prompt: String,
        #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
        max_new: u64,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        /// Keep only the k most likely tokens when sampling (0 keeps all).
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure prefill and decode throughput.
    Bench {
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PROMPT_TOKENS)]
        prompt_tokens: usize,
        #[arg(long, default_value_t = DEFAULT_GEN_TOKENS)]
        gen_tokens: usize,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quantize a dense checkpoint, or report the predicted quantized size.
    Quantize {
        /// Dense checkpoint to quantize.
        model: Option<PathBuf>,
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, value_enum, default_value = "q4b")]
        format: FormatArg,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
        /// Print the predicted file size without writing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Next-token training on a synthetic corpus.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cpt")]
        stage: StageArg,
        /// sec41_cpt, table1_peak or sft; defaults to the stage's own profile.
        #[arg(long)]
        profile: Option<String>,
        /// Override the profile's peak learning rate.
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum, default_value = "copy")]
        corpus: CorpusArg,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        width: WidthArg,
    },
    /// Preference optimization against a frozen copy of the starting model.
    Dpo {
        model: PathBuf,
        /// JSON lines of {"prompt", "chosen", "rejected"} text.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Override the profile's learning rate.
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        width: WidthArg,
    },
    /// Compare every analytic gradient with central differences.
    Gradcheck {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one op's analytic gradient.
        #[arg(long, hide = true, value_parser = clap::builder::PossibleValuesParser::new(SUITE_OPS))]
        sabotage: Option<String>,
    },
}

fn emit(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load(path: &Path) -> Result<AnyModel> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn save(model: &AnyModel, path: &Path) -> Result<()> {
    let bytes = model.encoded_len();
    if bytes > LARGE_FILE_BYTES {
        eprintln!("warning: writing {bytes} bytes to {}", path.display());
    }
    save_checkpoint(model, path).with_context(|| format!("writing {}", path.display()))
}

fn dense_at(model: Model<f64>, width: WidthArg) -> AnyModel {
    match width {
        WidthArg::F32 => model.cast::<f32>().into(),
        WidthArg::F64 => model.into(),
    }
}

fn cmd_init(source: &ConfigSource, seed: u64, out: Option<&Path>, dry_run: bool, width: WidthArg) -> Result<()> {
    let config = source.load()?;
    let params = param_count(&config)?;
    let bytes = encoded_len(&config, Storage::Dense(width.into()));
    emit(&json!({ "param_count": params, "bytes": bytes }))?;
    if dry_run {
        return Ok(());
    }
    let out = out.context("--out is required")?;
    if bytes > LARGE_FILE_BYTES {
        eprintln!("warning: {params} parameters make a {bytes}-byte file");
    }
    let model: AnyModel = match width {
        WidthArg::F32 => init_model::<f32>(&config, seed)?.into(),
        WidthArg::F64 => init_model::<f64>(&config, seed)?.into(),
    };
    save(&model, out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_generate(path: &Path, prompt: &str, max_new: usize, mode: SamplingMode, seed: u64) -> Result<()> {
    let model = load(path)?;
    let tok = ByteTokenizer;
    let ids = tok.encode(prompt);
    let out = model.generate(&ids, max_new, mode, seed)?;
    println!("{}", tok.decode(&out)?);
    Ok(())
}

fn cmd_bench(path: &Path, opts: BenchOptions) -> Result<()> {
    let model = load(path)?;
    eprintln!(
        "bench: {} prompt tokens, {} generated, 1 warmup + {} timed runs",
        opts.prompt_tokens, opts.gen_tokens, opts.repeats
    );
    emit(&bench(&model, opts)?)
}

fn cmd_quantize(model: Option<&Path>, source: &ConfigSource, format: QFormat, out: Option<&Path>, dry_run: bool) -> Result<()> {
    let loaded = model.map(load).transpose()?;
    let config = match &loaded {
        Some(m) => m.config().clone(),
        None => source.load()?,
    };
    let predicted = predicted_size(&config, format)?;
    if dry_run {
        return emit(&json!({ "format": format.name(), "predicted_bytes": predicted }));
    }
    let Some(dense) = loaded else {
        bail!("quantizing needs a dense checkpoint; pass MODEL or use --dry-run");
    };
    let out = out.context("--out is required")?;
    let q: AnyModel = match &dense {
        AnyModel::F32(m) => quantize_model(m, format)?.into(),
        AnyModel::F64(m) => quantize_model(m, format)?.into(),
        AnyModel::Quant(_) => bail!("checkpoint is already quantized"),
    };
    save(&q, out)?;
    let bytes = fs::metadata(out)?.len();
    emit(&json!({ "format": format.name(), "bytes": bytes, "predicted_bytes": predicted }))
}

fn starting_model(source: &ConfigSource, model: Option<&Path>, seed: u64) -> Result<Model<f64>> {
    match model {
        Some(path) => Ok(load(path)?.to_dense::<f64>()?),
        None => Ok(init_model::<f64>(&source.load()?, seed)?),
    }
}

fn log_step(rec: &StepRecord) {
    if let Err(e) = emit(rec) {
        eprintln!("warning: could not write metrics: {e}");
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    source: &ConfigSource,
    model: Option<&Path>,
    stage: StageArg,
    profile: Option<&str>,
    peak_lr: Option<f64>,
    steps: usize,
    corpus: CorpusArg,
    batch: usize,
    seq_len: usize,
    seed: u64,
    out: &Path,
    width: WidthArg,
) -> Result<()> {
    ensure!(steps > 0, "--steps must be positive");
    ensure!(batch > 0, "--batch must be positive");
    let stage = match stage {
        StageArg::Cpt => Stage::Cpt,
        StageArg::Sft => Stage::Sft,
    };
    let default_profile = if stage == Stage::Cpt { "sec41_cpt" } else { "sft" };
    let mut profile = HyperProfile::by_name(profile.unwrap_or(default_profile))?;
    ensure!(
        profile.stage == stage,
        "profile {} belongs to the {:?} stage",
        profile.name,
        profile.stage
    );
    if let Some(lr) = peak_lr {
        profile.peak_lr = lr;
    }
    let mut m = starting_model(source, model, seed)?;
    let kind = match corpus {
        CorpusArg::Copy => CorpusKind::Copy,
        CorpusArg::Repeat => CorpusKind::Repeat,
    };
    let data = SyntheticCorpus::new(kind, seed, seq_len, steps * batch)?;
    eprintln!(
        "train: profile {} peak {} for {steps} steps on {} ({} params)",
        profile.name,
        profile.peak_lr,
        format!("{kind:?}").to_lowercase(),
        m.num_scalars()
    );
    let max_seq = profile.max_seq;
    let mut objective = LmObjective::new(|step, micro| data.batch((step - 1) * profile.grad_accum + micro, batch), max_seq);
    let log = train_loop(&mut m, &mut objective, &profile, steps, log_step)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        eprintln!("loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    save(&dense_at(m, width), out)
}

#[derive(Deserialize)]
struct PairLine {
    prompt: String,
    chosen: String,
    rejected: String,
}

fn read_pairs(path: &Path, max_prompt: usize) -> Result<Vec<PreferencePair>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let tok = ByteTokenizer;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: PairLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{lineno}: malformed pair", path.display()))?;
        let pair = PreferencePair {
            prompt: tok.encode(&raw.prompt),
            chosen: tok.encode(&raw.chosen),
            rejected: tok.encode(&raw.rejected),
        };
        pair.validate(max_prompt)
            .with_context(|| format!("{}:{lineno}: rejected pair", path.display()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

fn cmd_dpo(
    path: &Path,
    pairs: &Path,
    steps: usize,
    peak_lr: Option<f64>,
    seed: u64,
    out: &Path,
    width: WidthArg,
) -> Result<()> {
    ensure!(steps > 0, "--steps must be positive");
    let mut profile = HyperProfile::dpo();
    if let Some(lr) = peak_lr {
        profile.peak_lr = lr;
    }
    let max_prompt = profile.max_prompt.unwrap_or(usize::MAX);
    let mut pairs = read_pairs(pairs, max_prompt)?;
    // The seed fixes which pairs share an accumulation micro-batch.
    let mut rng = Rng::new(seed);
    for i in (1..pairs.len()).rev() {
        pairs.swap(i, rng.below(i + 1));
    }
    let beta = profile.beta.context("preference profile without beta")?;
    let mut m = load(path)?.to_dense::<f64>()?;
    let mut objective = DpoObjective::new(&m, pairs, beta, max_prompt)?;
    eprintln!(
        "dpo: {} pairs, beta {beta}, lr {}, grad_accum {}",
        objective.pairs().len(),
        profile.peak_lr,
        profile.grad_accum
    );
    train_loop(&mut m, &mut objective, &profile, steps, log_step)?;
    save(&dense_at(m, width), out)
}

fn cmd_gradcheck(source: &ConfigSource, seed: u64, sabotage: Option<&str>) -> Result<bool> {
    let config = source.load()?;
    let reports = gradcheck_suite(&config, seed, sabotage)?;
    for r in &reports {
        emit(r)?;
        if !r.passed {
            eprintln!("FAIL {}: max relative error {:e}", r.name, r.max_rel_err);
        }
    }
    let ok = reports.iter().all(|r| r.passed);
    eprintln!("{} of {} checks passed", reports.iter().filter(|r| r.passed).count(), reports.len());
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Init {
            source,
            seed,
            out,
            dry_run,
            width,
        } => cmd_init(&source, seed, out.as_deref(), dry_run, width)?,
        Command::Generate {
            model,
            prompt,
            max_new,
            mode,
            temp,
            top_k,
            seed,
        } => {
            let mode = match mode {
                ModeArg::Greedy => SamplingMode::Greedy,
                ModeArg::Sample => SamplingMode::Sample {
                    temperature: temp,
                    top_k,
                },
            };
            cmd_generate(&model, &prompt, usize::try_from(max_new)?, mode, seed)?
        }
        Command::Bench {
            model,
            prompt_tokens,
            gen_tokens,
            repeats,
            seed,
        } => cmd_bench(
            &model,
            BenchOptions {
                prompt_tokens,
                gen_tokens,
                repeats,
                seed,
            },
        )?,
        Command::Quantize {
            model,
            source,
            format,
            out,
            dry_run,
        } => cmd_quantize(model.as_deref(), &source, format.into(), out.as_deref(), dry_run)?,
        Command::Train {
            source,
            model,
            stage,
            profile,
            peak_lr,
            steps,
            corpus,
            batch,
            seq_len,
            seed,
            out,
            width,
        } => cmd_train(
            &source,
            model.as_deref(),
            stage,
            profile.as_deref(),
            peak_lr,
            steps,
            corpus,
            batch,
            seq_len,
            seed,
            &out,
            width,
        )?,
        Command::Dpo {
            model,
            pairs,
            steps,
            peak_lr,
            seed,
            out,
            width,
        } => cmd_dpo(&model, &pairs, steps, peak_lr, seed, &out, width)?,
        Command::Gradcheck { source, seed, sabotage } => return cmd_gradcheck(&source, seed, sabotage.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
