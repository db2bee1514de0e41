//! triglab: forge backdoored toy models, run circuit-analysis experiments,
//! and verify model files.
//!
//! Exit codes: 0 success, 2 config error, 3 model I/O error,
//! 4 verification failure.

mod config;
mod experiments;
mod verify;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use triglab_core::forge::{
    gen_corpus, handcraft_model, read_blueprint, train_model, write_blueprint, write_corpus,
    CircuitBlueprint, LanguageSpec, TrainConfig,
};
use triglab_core::model::{load_model, save_model, ModelConfig, NormMode};
use triglab_core::numeric::SeedKey;
use triglab_core::report::{atomic_write, fmt_f64, Csv};
use triglab_core::stimuli::{build_stimuli, success_rate, Condition, IndicatorSets};

const EXIT_CONFIG: i32 = 2;
const EXIT_MODEL_IO: i32 = 3;
const EXIT_VERIFY: i32 = 4;

#[derive(Parser)]
#[command(name = "triglab", version, about = "Desk-scale trigger-circuit laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Produce a model file: handcrafted circuit or poisoned training.
    Forge {
        #[command(subcommand)]
        kind: ForgeKind,
    },
    /// Run a named experiment against a model file.
    Run(RunArgs),
    /// Run the invariant suite against a model file.
    Verify {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Subcommand)]
enum ForgeKind {
    /// Construct the known-circuit model directly from weights.
    Handcraft(HandcraftArgs),
    /// Train a model on a poisoned synthetic corpus.
    Train(TrainArgs),
}

#[derive(Args)]
struct HandcraftArgs {
    /// Output model path (sidecars <out>.lang.json and <out>.blueprint.json
    /// are written next to it).
    #[arg(long)]
    out: PathBuf,
    /// Config file mirroring these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Language-spec seed.
    #[arg(long)]
    lang_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lang_seed: Option<u64>,
    /// Training seed (init, batch order, corpus).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    poison_rate: Option<f64>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Also write the generated corpus next to the model.
    #[arg(long)]
    emit_corpus: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// One of: ceiling, resid-sweep, mlp-sweep, attn-sweep, head-sweep,
    /// attn-map, ablate-layers, ablate-trigpos, kv-knockout, probes, dnat,
    /// scramble-dist, word-perms, corrupt-compare, success.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    /// gaussian | neutral
    #[arg(long)]
    corruption: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (TRIGLAB_OUT overrides).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer for ablate-trigpos (default: n_layers − 2).
    #[arg(long)]
    layer: Option<usize>,
    /// Natural pair count for probes/dnat.
    #[arg(long)]
    pairs: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Forge { kind } => match kind {
            ForgeKind::Handcraft(args) => report_err(cmd_handcraft(args)),
            ForgeKind::Train(args) => report_err(cmd_train(args)),
        },
        Cmd::Run(args) => report_err(cmd_run(args)),
        Cmd::Verify { model } => cmd_verify(&model),
    };
    std::process::exit(code);
}

/// Map an error chain to an exit code; model-file problems are distinguished
/// from config problems.
fn report_err(result: Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            let mut code = EXIT_CONFIG;
            for cause in e.chain() {
                if let Some(core) = cause.downcast_ref::<triglab_core::Error>() {
                    if matches!(
                        core,
                        triglab_core::Error::ModelFile(_) | triglab_core::Error::Io(_)
                    ) {
                        code = EXIT_MODEL_IO;
                    }
                }
            }
            code
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<config::ConfigFile> {
    match path {
        Some(p) => config::ConfigFile::load(p),
        None => Ok(config::ConfigFile::default()),
    }
}

fn cmd_handcraft(args: HandcraftArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&["lang_seed", "out"])?;
    let lang_seed = config::resolve(args.lang_seed, file.parse("lang_seed")?, 11);
    let spec = LanguageSpec::synthetic(lang_seed);
    let model_config = ModelConfig::desk_scale(NormMode::Identity);
    let blueprint = CircuitBlueprint::default_for(&model_config)?;
    let (weights, blueprint) = handcraft_model(&model_config, &spec, &blueprint)?;
    save_model(&weights, &args.out)?;
    write_blueprint(&blueprint, &verify::sidecar_path(&args.out, "blueprint.json"))?;
    atomic_write(
        &verify::sidecar_path(&args.out, "lang.json"),
        &serde_json::to_vec_pretty(&spec)?,
    )?;

    // Round-trip self-check: reload the file just written and confirm the
    // planted circuit behaves.
    let loaded = load_model(&args.out)?;
    if !loaded.checksum_ok {
        bail!("fresh model file failed its checksum");
    }
    let ind = IndicatorSets::from_spec(&spec, 20)?;
    let key = SeedKey::new(lang_seed, "forge-selfcheck");
    let trig = build_stimuli(&spec, 20, Condition::Triggered, &key.derived("t"))?;
    let clean = build_stimuli(&spec, 20, Condition::Clean, &key.derived("c"))?;
    let trig_rate = success_rate(&loaded.weights, &trig, &ind)?.rate;
    let clean_rate = success_rate(&loaded.weights, &clean, &ind)?.rate;
    if trig_rate < 1.0 || clean_rate > 0.0 {
        bail!("handcraft self-check failed: triggered {trig_rate}, clean {clean_rate}");
    }
    let _ = read_blueprint(&verify::sidecar_path(&args.out, "blueprint.json"))?;
    println!(
        "handcrafted model written to {} (triggered {trig_rate:.2}, clean {clean_rate:.2})",
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&[
        "lang_seed",
        "seed",
        "steps",
        "batch_size",
        "learning_rate",
        "poison_rate",
        "corpus_size",
        "seq_len",
        "n_layers",
        "d_model",
        "out",
    ])?;
    let lang_seed = config::resolve(args.lang_seed, file.parse("lang_seed")?, 11);
    let seed = config::resolve(args.seed, file.parse("seed")?, 0);
    let steps = config::resolve(args.steps, file.parse("steps")?, 600);
    let batch_size = config::resolve(args.batch_size, file.parse("batch_size")?, 32);
    let learning_rate = config::resolve(args.learning_rate, file.parse("learning_rate")?, 3e-3);
    let poison_rate = config::resolve(args.poison_rate, file.parse("poison_rate")?, 0.05);
    let corpus_size = config::resolve(args.corpus_size, file.parse("corpus_size")?, 4000);
    let seq_len = config::resolve(args.seq_len, file.parse("seq_len")?, 14);
    let n_layers = config::resolve(args.n_layers, file.parse("n_layers")?, 6);
    let d_model = config::resolve(args.d_model, file.parse("d_model")?, 64);

    if steps == 0 {
        bail!("no training steps");
    }
    let spec = LanguageSpec::synthetic(lang_seed);
    let model_config = ModelConfig {
        n_layers,
        d_model,
        n_heads: 4,
        d_mlp: 4 * d_model,
        vocab_size: spec.vocab_size,
        max_seq_len: 64,
        norm_mode: NormMode::Rms,
        norm_eps: 1e-6,
    };
    let corpus = gen_corpus(
        &spec,
        corpus_size,
        seq_len,
        poison_rate,
        &SeedKey::new(seed, "train-corpus"),
    )?;
    let tc = TrainConfig {
        learning_rate,
        batch_size,
        steps,
        poison_rate,
        seed,
        ..Default::default()
    };
    let (weights, curve) = train_model(&model_config, &corpus, &tc)?;
    save_model(&weights, &args.out)?;
    atomic_write(
        &verify::sidecar_path(&args.out, "lang.json"),
        &serde_json::to_vec_pretty(&spec)?,
    )?;
    let mut loss_csv = Csv::new(&["step", "loss"]);
    for (i, l) in curve.iter().enumerate() {
        loss_csv.row(&[i.to_string(), fmt_f64(*l)]);
    }
    loss_csv.write(&verify::sidecar_path(&args.out, "loss.csv"))?;
    if args.emit_corpus {
        write_corpus(&corpus, &verify::sidecar_path(&args.out, "corpus.jsonl"))?;
    }
    println!(
        "trained model written to {} (final loss {:.4})",
        args.out.display(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&[
        "model",
        "experiment",
        "prompts",
        "seeds",
        "corruption",
        "seed",
        "out",
        "layer",
        "pairs",
    ])?;
    let experiment = args
        .experiment
        .or_else(|| file.get("experiment").map(String::from))
        .ok_or_else(|| anyhow!("--experiment is required"))?;
    if !experiments::EXPERIMENTS.contains(&experiment.as_str()) {
        bail!(
            "unknown experiment `{experiment}`; expected one of {}",
            experiments::EXPERIMENTS.join(", ")
        );
    }
    // corrupt-compare follows the 30-prompt paired protocol by default.
    let default_prompts = if experiment == "corrupt-compare" { 30 } else { 100 };
    let n_prompts = config::resolve(args.prompts, file.parse("prompts")?, default_prompts);
    let n_seeds = config::resolve(args.seeds, file.parse("seeds")?, 5);
    let corruption = config::resolve(
        args.corruption,
        file.get("corruption").map(String::from),
        "gaussian".into(),
    );
    let seed = config::resolve(args.seed, file.parse("seed")?, 0);
    let pairs = config::resolve(args.pairs, file.parse("pairs")?, 30);
    let layer = args.layer.or(file.parse("layer")?);
    if n_prompts == 0 || n_seeds == 0 {
        bail!("prompts and seeds must be >= 1");
    }
    // The environment override applies to the output directory only.
    let out = std::env::var_os("TRIGLAB_OUT")
        .map(PathBuf::from)
        .or(args.out)
        .or_else(|| file.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let loaded = load_model(&args.model)?;
    let lang_path = verify::sidecar_path(&args.model, "lang.json");
    let lang_bytes = std::fs::read(&lang_path)
        .map_err(|e| triglab_core::Error::ModelFile(format!("{}: {e}", lang_path.display())))?;
    let spec: LanguageSpec =
        serde_json::from_slice(&lang_bytes).context("parsing language sidecar")?;
    spec.validate()?;
    let blueprint_path = verify::sidecar_path(&args.model, "blueprint.json");
    let blueprint =
        if blueprint_path.exists() { Some(read_blueprint(&blueprint_path)?) } else { None };
    let ind = IndicatorSets::from_spec(&spec, 20)?;

    let ctx = experiments::RunCtx {
        weights: loaded.weights,
        spec,
        blueprint,
        ind,
        experiment: experiment.clone(),
        n_prompts,
        n_seeds,
        corruption,
        seed,
        pairs,
        layer,
        outdir: out,
    };
    experiments::run_experiment(&ctx)?;
    println!("{experiment} written to {}", ctx.outdir.display());
    Ok(())
}

fn cmd_verify(model: &Path) -> i32 {
    match verify::verify_model(model) {
        Ok(true) => 0,
        Ok(false) => EXIT_VERIFY,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_MODEL_IO
        }
    }
}
