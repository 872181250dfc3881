//! `steer-sae`: train k-sparse autoencoders on embedding datasets and steer
//! prompt embeddings with a trained checkpoint.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format/config error,
//! 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use steer_sae::analysis::{dictionary_similarity, latent_report, match_concept, LatentReport};
use steer_sae::presets::{preset, Overrides};
use steer_sae::steering::{concept_from_prompts, steer, EncoderMode, SteerRequest, Variant};
use steer_sae::trainer::{load_checkpoint, save_checkpoint, train, write_metrics_log};
use steer_sae::{generate_synthetic, npy, DatasetManifest, EmbeddingMatrix, Error, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(name = "steer-sae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a k-SAE and write a checkpoint directory plus a metrics log.
    Train(TrainArgs),
    /// Steer a prompt embedding toward or away from a concept.
    Steer(SteerArgs),
    /// Report latent statistics or rank latents for a concept.
    Inspect(InspectArgs),
    /// Generate a synthetic sparse-dictionary dataset with its oracle dictionary.
    Synth(SynthArgs),
    /// Write a dataset manifest for a set of NPY shards.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// JSON file with any of the model/training knobs.
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Named preset: paper-unsafe or paper-style.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long)]
    k_aux: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelFlags {
    /// Flags over config file over preset.
    fn overrides(&self) -> Result<Overrides, Error> {
        let mut layered = match &self.preset {
            Some(name) => preset(name)?,
            None => Overrides::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let file: Overrides = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            layered = layered.layer(&file);
        }
        let flags = Overrides {
            k: self.k,
            expansion: self.expansion,
            k_aux: self.k_aux,
            alpha: self.alpha,
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
            seed: self.seed,
            ..Default::default()
        };
        Ok(layered.layer(&flags))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest JSON.
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Metrics log path (JSON lines); defaults to DIR/metrics.jsonl.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Relu,
    Topk,
}

impl From<ModeArg> for EncoderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Relu => EncoderMode::ReluOnly,
            ModeArg::Topk => EncoderMode::TopK,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    V1,
    V2,
    V3,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::V1 => Variant::V1,
            VariantArg::V2 => Variant::V2,
            VariantArg::V3 => Variant::V3,
        }
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("strength").required(true).args(["lambda", "lambda_grid"])))]
struct SteerArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Prompt embedding, tokens x d.
    #[arg(long, value_name = "NPY")]
    prompt_emb: PathBuf,
    /// Concept embedding on the prompt's token grid; repeat to average several.
    #[arg(long, value_name = "NPY", required = true)]
    concept_emb: Vec<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f32>,
    /// Comma-separated strengths; writes one output per value plus sweep.csv.
    #[arg(long, value_name = "a,b,c", value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    lambda_grid: Option<Vec<f32>>,
    #[arg(long, value_enum, default_value = "relu")]
    encoder_mode: ModeArg,
    #[arg(long, value_enum, default_value = "full")]
    variant: VariantArg,
    /// Output NPY for a single lambda, output directory for a grid.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["data", "concept_emb"])))]
struct InspectArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Sample for latent statistics: a manifest JSON or a single NPY.
    #[arg(long, value_name = "MANIFEST|NPY")]
    data: Option<PathBuf>,
    /// Concept embeddings to rank latents for; repeatable.
    #[arg(long, value_name = "NPY")]
    concept_emb: Vec<PathBuf>,
    /// Identifier recorded in the concept report.
    #[arg(long, default_value = "concept")]
    concept_id: String,
    #[arg(long, default_value_t = 10)]
    top_m: usize,
    /// Ground-truth dictionary (d x m) to score recovery against.
    #[arg(long, value_name = "NPY", requires = "data")]
    dictionary: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    atoms: usize,
    #[arg(long)]
    sparsity: usize,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw supports only from the first N atoms.
    #[arg(long)]
    active_atoms: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// NPY shards, in order.
    #[arg(required = true, value_name = "NPY")]
    shards: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path to write.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Serialize)]
struct InspectReport {
    #[serde(flatten)]
    report: LatentReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    dictionary_similarity: Option<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let (ksae, cfg) = args.model.overrides()?.resolve(manifest.dim);
    log::info!(
        "training d={} n={} k={} k_aux={} alpha={} for {} steps of {}",
        ksae.d,
        ksae.n(),
        ksae.k,
        ksae.k_aux,
        ksae.alpha,
        cfg.total_steps,
        cfg.batch_size
    );
    let metrics_path = args.out.clone().unwrap_or_else(|| args.checkpoint.join("metrics.jsonl"));
    match train(&manifest, &ksae, &cfg) {
        Ok(out) => {
            save_checkpoint(&out.checkpoint, &args.checkpoint)?;
            ensure_parent(&metrics_path)?;
            write_metrics_log(&out.metrics, &metrics_path)?;
            if let Some(last) = out.metrics.last() {
                eprintln!(
                    "step {}: loss_mse {:.6} loss_aux {:.6} dead {}",
                    last.step, last.loss_mse, last.loss_aux, last.dead_count
                );
            }
            Ok(())
        }
        Err(failure) => {
            if let Some(ckpt) = &failure.last_checkpoint {
                let name = args
                    .checkpoint
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "checkpoint".into());
                let rescue = args.checkpoint.with_file_name(format!("{name}.failed"));
                save_checkpoint(ckpt, &rescue)?;
                eprintln!("last good state (step {}) written to {}", ckpt.step, rescue.display());
            }
            Err(Error::from(failure).into())
        }
    }
}

fn lambda_file_name(lambda: f32) -> String {
    format!("lambda_{lambda}.npy")
}

fn diagnostics_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "steered".into());
    out.with_file_name(format!("{stem}.diagnostics.json"))
}

fn run_steer(args: &SteerArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let x = npy::read_array(&args.prompt_emb)?;
    let concepts = args
        .concept_emb
        .iter()
        .map(npy::read_array)
        .collect::<Result<Vec<_>, _>>()?;
    let concept = concept_from_prompts(&concepts)?;
    let request = |lambda: f32| SteerRequest {
        x: x.clone(),
        concept: concept.clone(),
        lambda,
        encoder_mode: args.encoder_mode.into(),
        variant: args.variant.into(),
    };

    if let Some(lambda) = args.lambda {
        let res = steer(&ckpt.params, &ckpt.ksae, &request(lambda))?;
        ensure_parent(&args.out)?;
        npy::write_array(&res.x_steered, &args.out)?;
        write_json(&diagnostics_path(&args.out), &res.diagnostics)?;
        return Ok(());
    }

    let grid = args.lambda_grid.as_deref().unwrap_or_default();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut csv = String::from("lambda,file,offset_norm\n");
    let mut diagnostics = None;
    for &lambda in grid {
        let res = steer(&ckpt.params, &ckpt.ksae, &request(lambda))?;
        let name = lambda_file_name(lambda);
        npy::write_array(&res.x_steered, args.out.join(&name))?;
        let norm = res.offset.values().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        csv.push_str(&format!("{lambda},{name},{norm}\n"));
        diagnostics.get_or_insert(res.diagnostics);
    }
    let csv_path = args.out.join("sweep.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    if let Some(d) = diagnostics {
        write_json(&args.out.join("diagnostics.json"), &d)?;
    }
    Ok(())
}

fn load_sample(path: &Path) -> Result<EmbeddingMatrix, Error> {
    if path.extension().is_some_and(|e| e == "npy") {
        npy::read_array(path)
    } else {
        Ok(DatasetManifest::load(path)?.load_dataset()?.matrix)
    }
}

fn run_inspect(args: &InspectArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if !args.concept_emb.is_empty() {
        let concepts = args
            .concept_emb
            .iter()
            .map(npy::read_array)
            .collect::<Result<Vec<_>, _>>()?;
        let m = match_concept(&ckpt.params, &ckpt.ksae, &args.concept_id, &concepts, args.top_m)?;
        return write_json(&args.out, &m);
    }
    let data = args.data.as_ref().expect("clap enforces data or concept_emb");
    let sample = load_sample(data)?;
    let report = latent_report(&ckpt.params, &ckpt.ksae, &sample)?;
    let dictionary_similarity = match &args.dictionary {
        Some(p) => Some(dictionary_similarity(&ckpt.params, &npy::read_array(p)?)?),
        None => None,
    };
    write_json(
        &args.out,
        &InspectReport {
            report,
            dictionary_similarity,
        },
    )
}

fn run_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        dim: args.dim,
        atoms: args.atoms,
        sparsity: args.sparsity,
        samples: args.samples,
        noise_std: args.noise,
        seed: args.seed,
        active_atoms: args.active_atoms,
    };
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    npy::write_array(&data.samples, args.out.join("samples.npy"))?;
    npy::write_array(&data.dictionary, args.out.join("dictionary.npy"))?;
    let mut manifest = DatasetManifest::from_shards(vec![args.out.join("samples.npy")], args.seed)?;
    manifest.shards = vec![PathBuf::from("samples.npy")];
    manifest.provenance = format!(
        "synthetic d={} m={} s={} noise={} seed={}",
        spec.dim, spec.atoms, spec.sparsity, spec.noise_std, spec.seed
    );
    manifest.save(args.out.join("manifest.json"))?;
    Ok(())
}

fn run_convert(args: &ConvertArgs) -> anyhow::Result<()> {
    let mut manifest = DatasetManifest::from_shards(args.shards.clone(), args.seed)?;
    let base = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.canonicalize())
        .transpose()
        .with_context(|| format!("resolving {}", args.out.display()))?
        .unwrap_or(std::env::current_dir()?);
    manifest.shards = args
        .shards
        .iter()
        .map(|s| {
            let abs = s.canonicalize().map_err(|e| Error::Io {
                path: s.clone(),
                source: e,
            })?;
            Ok(abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs))
        })
        .collect::<Result<_, Error>>()?;
    manifest.save(&args.out)?;
    eprintln!("{} rows x {} from {} shards", manifest.total_rows, manifest.dim, manifest.shards.len());
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("STEER_SAE_THREADS") {
        let threads: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("STEER_SAE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Steer(a) => run_steer(a),
        Command::Inspect(a) => run_inspect(a),
        Command::Synth(a) => run_synth(a),
        Command::Convert(a) => run_convert(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
