use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use visdial_transfer::autodiff::Tape;
use visdial_transfer::config::RunConfig;
use visdial_transfer::data::{corpus_texts, read_raw_dialogs, split_dialogs, synth_generate, write_raw_dialogs, Vocabulary};
use visdial_transfer::encoder::EncoderInput;
use visdial_transfer::eval::{append_metrics, format_table, MetricsRecord};
use visdial_transfer::generator::GumbelNoise;
use visdial_transfer::transfer::{
    derive_seed, evaluate_discriminator, evaluate_generator, synth_config, Corpus, Models, Phase, Trainer, METRICS_FILE, STATE_FILE,
};
use visdial_transfer::Error;

#[derive(Parser)]
#[command(name = "visdial", about = "Generative visual dialog trained through a discriminator's metric space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set d=64`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; default `runs/<timestamp>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to start from (both models are read when present).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue from the run directory's saved state.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary from the training dialogs.
    BuildVocab(Common),
    /// Write a synthetic dataset (dialogs, features, vocabulary) to the configured paths.
    SynthData(Common),
    /// Phase 1: generator MLE pretraining.
    PretrainG(TrainArgs),
    /// Phase 2: discriminator n-pair pretraining.
    PretrainD(TrainArgs),
    /// Phase 3 in the configured mode (transfer, gan1 or gan2).
    Transfer(TrainArgs),
    /// All three phases in one run.
    Train(TrainArgs),
    /// Retrieval metrics of both models on the validation dialogs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding both models.
        #[arg(long)]
        init: PathBuf,
    },
    /// Sample answers to validation questions with distinct noise draws.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding the generator.
        #[arg(long)]
        init: PathBuf,
        /// Answers per question; default from the config.
        #[arg(long)]
        samples: Option<usize>,
        /// Number of questions.
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
}

fn resolve(c: &Common) -> visdial_transfer::Result<(RunConfig, PathBuf)> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = base.with_overrides(&overrides)?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), cfg.seed)));
    Ok((cfg, out))
}

fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn ensure_parent(path: &str) -> anyhow::Result<()> {
    if let Some(parent) = Path::new(path).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn load_models(cfg: &RunConfig, corpus: &Corpus, init: Option<&Path>) -> anyhow::Result<Models> {
    let mut models = Models::new(cfg.encoder_config(corpus.vocab_size, corpus.features.d_img()), cfg.seed)?;
    if let Some(p) = init {
        let entries = visdial_transfer::nn::read_checkpoint(p)?;
        let has = |prefix: &str| entries.keys().any(|k| k.starts_with(prefix));
        if !has("g.") && !has("d.") {
            bail!("{} holds no model parameters", p.display());
        }
        if has("g.") {
            models.g_store.load_named("g", &entries)?;
        }
        if has("d.") {
            models.d_store.load_named("d", &entries)?;
        }
    }
    Ok(models)
}

fn train(args: &TrainArgs, first: Phase, last: Phase) -> anyhow::Result<()> {
    let (cfg, out) = resolve(&args.common)?;
    let (corpus, _) = Corpus::load(&cfg)?;
    prepare_run_dir(&out, &cfg)?;
    let mut trainer = if args.resume {
        if !out.join(STATE_FILE).exists() {
            bail!("nothing to resume in {}", out.display());
        }
        Trainer::resume(cfg.clone(), &corpus, &out)?
    } else {
        if out.join(METRICS_FILE).exists() {
            bail!("{} already holds a run; pass --resume or choose another --out", out.display());
        }
        let models = load_models(&cfg, &corpus, args.init.as_deref())?;
        Trainer::with_models(cfg.clone(), &corpus, &out, models, first)
    };
    trainer.run_until(last, None)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildVocab(common) => {
            let (cfg, out) = resolve(&common)?;
            prepare_run_dir(&out, &cfg)?;
            let raw = read_raw_dialogs(Path::new(&cfg.train_dialogs))?;
            let vocab = Vocabulary::build(corpus_texts(&raw), cfg.min_count);
            ensure_parent(&cfg.vocab)?;
            vocab.save(Path::new(&cfg.vocab))?;
            println!("{} tokens -> {}", vocab.len(), cfg.vocab);
        }
        Command::SynthData(common) => {
            let (cfg, out) = resolve(&common)?;
            prepare_run_dir(&out, &cfg)?;
            let data = synth_generate(&synth_config(&cfg))?;
            let vocab = Vocabulary::build(corpus_texts(&data.dialogs), 1);
            let (train, val) = split_dialogs(&data.dialogs, cfg.val_fraction);
            for p in [&cfg.train_dialogs, &cfg.val_dialogs, &cfg.features, &cfg.vocab] {
                ensure_parent(p)?;
            }
            write_raw_dialogs(Path::new(&cfg.train_dialogs), &train)?;
            write_raw_dialogs(Path::new(&cfg.val_dialogs), &val)?;
            data.features.write(Path::new(&cfg.features))?;
            vocab.save(Path::new(&cfg.vocab))?;
            println!("{} train / {} val dialogs, {} tokens", train.len(), val.len(), vocab.len());
        }
        Command::PretrainG(a) => train(&a, Phase::PretrainG, Phase::PretrainG)?,
        Command::PretrainD(a) => train(&a, Phase::PretrainD, Phase::PretrainD)?,
        Command::Transfer(a) => {
            if a.init.is_none() && !a.resume {
                bail!("transfer needs pretrained models: pass --init <checkpoint>");
            }
            train(&a, Phase::Adapt, Phase::Adapt)?
        }
        Command::Train(a) => train(&a, Phase::PretrainG, Phase::Adapt)?,
        Command::Evaluate { common, init } => {
            let (cfg, out) = resolve(&common)?;
            let (corpus, _) = Corpus::load(&cfg)?;
            prepare_run_dir(&out, &cfg)?;
            let models = load_models(&cfg, &corpus, Some(&init))?;
            let (g, g_loss) = evaluate_generator(&models, &corpus.val, &corpus.features, &cfg)?;
            let (d, d_loss) = evaluate_discriminator(&models, &corpus.val, &corpus.features, &cfg)?;
            let path = out.join(METRICS_FILE);
            for (name, report, loss) in [("g", &g, g_loss), ("d", &d, d_loss)] {
                let mut rec = MetricsRecord::new("evaluate", 0, "val", name, report, cfg.tie_policy);
                rec.mean_loss = Some(loss);
                append_metrics(&path, &rec)?;
            }
            print!("{}", format_table(&[("G".into(), g), ("D".into(), d)]));
        }
        Command::Generate { common, init, samples, limit } => {
            let (cfg, out) = resolve(&common)?;
            let (corpus, vocab) = Corpus::load(&cfg)?;
            prepare_run_dir(&out, &cfg)?;
            let models = load_models(&cfg, &corpus, Some(&init))?;
            let n = samples.unwrap_or(cfg.samples);
            if n == 0 {
                return Err(Error::Config("samples must be positive".into()).into());
            }
            let gumbel = cfg.gumbel();
            let mut lines = Vec::new();
            'outer: for (di, dialog) in corpus.val.iter().enumerate() {
                let image = corpus.features.get(&dialog.image_id).context("missing image features")?;
                for (r, round) in dialog.rounds.iter().enumerate() {
                    if lines.len() >= limit {
                        break 'outer;
                    }
                    let history = dialog.history(r);
                    let mut answers = Vec::with_capacity(n);
                    for s in 0..n {
                        let mut tape = Tape::new();
                        let p = models.g_store.bind(&mut tape, false);
                        let input = EncoderInput { image, history: &history, question: &round.question };
                        let e = models.g.encode(&mut tape, &p, &input)?.e_t;
                        let mut noise = GumbelNoise::seeded(derive_seed(&[cfg.seed, di as u64, r as u64, s as u64]));
                        let sample = models.g.sample_answer(&mut tape, &p, e, &gumbel, &mut noise)?;
                        answers.push(vocab.render(&sample.tokens));
                    }
                    let line = json!({
                        "image_id": dialog.image_id,
                        "round": r,
                        "question": vocab.render(&round.question),
                        "answer": vocab.render(&round.answer),
                        "samples": answers,
                    });
                    lines.push(line.to_string());
                }
            }
            let mut f = fs::File::create(out.join("samples.jsonl"))?;
            for l in &lines {
                writeln!(f, "{l}")?;
                println!("{l}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
