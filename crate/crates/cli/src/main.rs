use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use partcoord::checkpoint::Container;
use partcoord::config::{RunConfig, Stage};
use partcoord::coordinator::{PartCoordStack, SamplingStrategy};
use partcoord::datahub::{self, Dataset, DatasetManifest};
use partcoord::metrics::{fid, ContrastiveExtractor, FeatureExtractor};
use partcoord::partition::{Layout, Motion, PartitionScheme};
use partcoord::pipeline::{evaluate, CodecBundle, EvaluateOptions, TextToMotion};
use partcoord::rng::rng_for;
use partcoord::trainer::{split_all, train_codec, train_extractor, train_generator, LossCurve};
use partcoord::verify::{self, Suite, VerifyOptions};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "partcoord", version, about = "Part-coordinated text-to-motion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic coupled-motion dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the six part codecs.
    TrainVqvae {
        #[command(flatten)]
        run: RunArgs,
        /// Partition scheme file; defaults to the SMPL-22 assignment.
        #[arg(long)]
        scheme: Option<PathBuf>,
    },
    /// Train the evaluation feature extractor.
    TrainExtractor {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the coordinated generator on tokens from frozen codecs.
    TrainGen {
        #[command(flatten)]
        run: RunArgs,
        /// Directory written by train-vqvae.
        #[arg(long)]
        codecs: PathBuf,
        /// Extractor checkpoint; enables FID-based checkpoint selection.
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Tokenize a dataset split with frozen codecs.
    Encode {
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one motion from a prompt.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Upper bound on generated tokens per part; defaults to the model context.
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the repeated evaluation protocol on a dataset split.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = partcoord::metrics::DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = partcoord::metrics::DEFAULT_MMODALITY_REPEATS)]
        mm_repeats: usize,
        #[arg(long, default_value = "topk:10")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path (comma-separated table).
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt-length quartiles of a split.
    Quartiles {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run built-in verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break one check per suite (test fixture for failure reporting).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable: `--set steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Generator checkpoint written by train-gen.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Codec directory; defaults to the one recorded in the generator checkpoint.
    #[arg(long)]
    codecs: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.downcast_ref::<partcoord::Error>().map_or(false, |p| p.is_usage()));
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { out, n, frames, seed } => cmd_synth(&out, n, frames, seed)?,
        Command::TrainVqvae { run, scheme } => cmd_train_vqvae(&run, scheme.as_deref())?,
        Command::TrainExtractor { run } => cmd_train_extractor(&run)?,
        Command::TrainGen { run, codecs, extractor } => cmd_train_gen(&run, &codecs, extractor.as_deref())?,
        Command::Encode { codecs, data, split, out } => cmd_encode(&codecs, &data, &split, &out)?,
        Command::Generate { model, text, strategy, seed, max_len, out } => {
            cmd_generate(&model, &text, &strategy, seed, max_len, &out)?
        }
        Command::Evaluate { model, extractor, data, split, repeats, mm_repeats, strategy, seed, out } => {
            let opts = EvaluateOptions {
                repeats,
                mmodality_repeats: mm_repeats,
                seed,
                strategy: strategy.parse()?,
                ..EvaluateOptions::default()
            };
            cmd_evaluate(&model, &extractor, &data, &split, &opts, &out)?
        }
        Command::Quartiles { data, split } => {
            let ds = load_dataset(&data)?;
            let q = datahub::text_length_quartiles(&ds.pairs(&split)?)?;
            print!("{}", q.to_table());
        }
        Command::Verify { suite, seed, inject_fault } => {
            let suite: Suite = suite.parse()?;
            let report = verify::run(suite, &VerifyOptions { seed, inject_fault, ..VerifyOptions::default() })?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(out: &Path, n: usize, frames: usize, seed: u64) -> Result<()> {
    let corpus = datahub::synth_generate(n, frames, seed)?;
    datahub::write_synth_dataset(out, &corpus, seed)?;
    info!("wrote {n} synthetic sequences of {frames} frames to {}", out.display());
    Ok(())
}

fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::open(root)?;
    Ok(datahub::ingest(&manifest)?)
}

fn write_curve(dir: &Path, curve: &LossCurve) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).with_context(|| format!("creating {}", curves.display()))?;
    let p = curves.join(format!("{}.csv", curve.name));
    fs::write(&p, curve.to_csv()).with_context(|| format!("writing {}", p.display()))
}

fn resolve_config(stage: Stage, run: &RunArgs) -> Result<RunConfig> {
    let cfg = RunConfig::load(stage, run.config.as_deref(), &run.overrides)?;
    cfg.write_resolved(&run.out)?;
    Ok(cfg)
}

fn default_scheme(layout: &Layout, path: Option<&Path>) -> Result<PartitionScheme> {
    let scheme = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PartitionScheme::parse(&text, layout.clone())?
        }
        None if layout.id == Layout::SMPL22_ID => PartitionScheme::smpl22(),
        None => bail!(partcoord::Error::InvalidArgument(format!(
            "layout {} has no built-in partition; pass --scheme",
            layout.id
        ))),
    };
    scheme.validate(layout.width).into_result()?;
    Ok(scheme)
}

fn cmd_train_vqvae(run: &RunArgs, scheme_path: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(Stage::Vqvae, run)?;
    let ds = load_dataset(&run.data)?;
    let scheme = default_scheme(&ds.layout, scheme_path)?;
    let configs = cfg.codec_configs(&scheme)?;
    let opt = cfg.optimizer()?;
    let opts = cfg.vqvae_options()?;
    let motions: Vec<Motion> = ds.train.iter().map(|s| s.motion.clone()).collect();
    let per_part = split_all(&motions, &scheme)?;
    let mut codecs = Vec::new();
    let mut optimizers = Vec::new();
    for ((spec, parts), c) in scheme.parts.iter().zip(&per_part).zip(configs) {
        info!("training {} codec for {} steps", spec.part, opt.total_steps);
        let trained = train_codec(spec.part, parts, c, &opt, &opts)?;
        write_curve(&run.out, &trained.loss)?;
        write_curve(&run.out, &trained.reconstruction)?;
        let mse = partcoord::trainer::reconstruction_mse(&trained.codec, parts)?;
        println!("{}\treconstruction_mse\t{mse}", spec.part);
        codecs.push(trained.codec);
        optimizers.push(trained.optimizer);
    }
    let bundle = CodecBundle { layout: ds.layout.clone(), scheme, norm: ds.norm.clone(), codecs };
    bundle.save(&run.out)?;
    // Rewrite each codec checkpoint with the config echo and optimizer state.
    for (codec, opt) in bundle.codecs.iter().zip(&optimizers) {
        let mut c = codec.to_container();
        cfg.push_meta(&mut c);
        c.push_optimizer(&codec.params, opt);
        c.save(run.out.join(CodecBundle::codec_file(codec.part.name())))?;
    }
    info!("codecs written to {}", run.out.display());
    Ok(())
}

fn cmd_train_extractor(run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(Stage::Extractor, run)?;
    let ds = load_dataset(&run.data)?;
    let pairs: Vec<(Motion, String)> =
        ds.train.iter().flat_map(|s| s.prompts.iter().map(|p| (s.motion.clone(), p.clone()))).collect();
    let (model, curve) = train_extractor(&pairs, cfg.extractor_config(ds.layout.width)?, &cfg.optimizer()?)?;
    write_curve(&run.out, &curve)?;
    let mut c = model.to_container();
    cfg.push_meta(&mut c);
    let p = run.out.join("extractor.ckpt");
    c.save(&p)?;
    info!("extractor written to {}", p.display());
    Ok(())
}

fn load_extractor(path: &Path) -> Result<ContrastiveExtractor> {
    Ok(ContrastiveExtractor::from_container(&Container::load(path)?)?)
}

fn cmd_train_gen(run: &RunArgs, codecs_dir: &Path, extractor: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(Stage::Generator, run)?;
    let ds = load_dataset(&run.data)?;
    let bundle = CodecBundle::load(codecs_dir)?;
    if bundle.layout != ds.layout {
        bail!(partcoord::Error::InvalidArgument("dataset layout differs from the codecs' layout".into()));
    }
    let train = bundle.token_samples(&ds.train)?;
    let val = bundle.token_samples(&ds.val)?;
    let stack = cfg.stack_config(bundle.vocab()?)?;
    let opt = cfg.optimizer()?;
    let mut opts = cfg.generator_options()?;
    let extractor = extractor.map(load_extractor).transpose()?;
    let eval_samples: usize = cfg.get("eval_samples")?;
    let eval_set: Vec<&datahub::Sample> = ds.val.iter().take(eval_samples).collect();
    if extractor.is_none() || eval_set.len() < 2 {
        opts.eval_every = 0;
    }
    let mut hook = |model: &PartCoordStack, step: u64| -> partcoord::Result<f64> {
        let ex = extractor.as_ref().expect("hook runs only with an extractor");
        let gen = TextToMotion::new(&bundle, model, SamplingStrategy::TopK { k: 10, temperature: 1.0 });
        let prompts: Vec<&str> = eval_set.iter().map(|s| s.prompts[0].as_str()).collect();
        let mut rng = rng_for(opt.seed, "generator/eval", step);
        let out = gen.generate_batch(&prompts, &mut rng)?;
        let generated: Vec<&Motion> = out.iter().map(|(_, m)| m).collect();
        let real: Vec<&Motion> = eval_set.iter().map(|s| &s.motion).collect();
        let f = fid(&ex.motion_features(&real)?, &ex.motion_features(&generated)?)?;
        info!("step {step}: validation FID {f:.4}");
        Ok(f)
    };
    let hook_ref: Option<&mut partcoord::trainer::EvalHook<'_>> =
        if opts.eval_every > 0 { Some(&mut hook) } else { None };
    let result = train_generator(&train, &val, stack, &opt, &cfg.augmentation()?, &opts, hook_ref)?;
    write_curve(&run.out, &result.loss)?;
    write_curve(&run.out, &result.val_nll)?;
    let mut evals = String::from("step,fid\n");
    for e in &result.evals {
        evals.push_str(&format!("{},{}\n", e.step, e.fid));
    }
    fs::write(run.out.join("curves").join("generator.fid.csv"), evals)?;
    let codecs_abs = fs::canonicalize(codecs_dir).unwrap_or_else(|_| codecs_dir.to_path_buf());
    for (name, model) in [("generator.ckpt", &result.best_model), ("generator_final.ckpt", &result.final_model)] {
        let mut c = model.to_container();
        cfg.push_meta(&mut c);
        c.push_meta("codecs_dir", codecs_abs.display());
        c.push_meta("codec_checkpoints", bundle.fingerprints().join(","));
        c.save(run.out.join(name))?;
    }
    match result.best_eval {
        Some(k) => info!("kept the step-{} model (lowest validation FID)", result.evals[k].step),
        None => info!("no FID evaluation ran; generator.ckpt is the final model"),
    }
    Ok(())
}

fn cmd_encode(codecs: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let bundle = CodecBundle::load(codecs)?;
    let ds = load_dataset(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let samples = ds.split(split)?;
    for s in samples {
        let grid = bundle.tokenize(&s.motion)?;
        fs::write(out.join(format!("{}.tok", s.id)), grid.to_text())?;
    }
    info!("wrote {} token grids to {}", samples.len(), out.display());
    Ok(())
}

fn load_model(args: &ModelArgs) -> Result<(PartCoordStack, CodecBundle, Container)> {
    let c = Container::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = PartCoordStack::from_container(&c)?;
    let dir = match &args.codecs {
        Some(d) => d.clone(),
        None => PathBuf::from(c.require_meta("codecs_dir")?),
    };
    let bundle = CodecBundle::load(&dir).with_context(|| format!("loading codecs from {}", dir.display()))?;
    if bundle.vocab()? != model.config.vocab || bundle.codecs.len() != model.config.streams {
        bail!(partcoord::Error::Config("generator and codecs disagree on vocabulary or part count".into()));
    }
    Ok((model, bundle, c))
}

fn cmd_generate(
    args: &ModelArgs,
    text: &str,
    strategy: &str,
    seed: u64,
    max_len: Option<usize>,
    out: &Path,
) -> Result<()> {
    if text.trim().is_empty() {
        bail!(partcoord::Error::InvalidArgument("prompt is empty".into()));
    }
    let strategy: SamplingStrategy = strategy.parse()?;
    let (model, bundle, _) = load_model(args)?;
    let mut gen = TextToMotion::new(&bundle, &model, strategy);
    if let Some(m) = max_len {
        gen.max_len = m;
    }
    let mut rng = rng_for(seed, "generate", 0);
    let grid = gen.generate_grid(text, &mut rng)?;
    let motion = bundle.decode(&grid)?;
    let motion = if motion.frames() == 0 {
        warn!("the generator ended immediately; writing an empty motion");
        motion
    } else {
        bundle.norm.denormalize(&motion)?
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    datahub::write_mot(&out.join("motion.mot"), &motion)?;
    fs::write(out.join("tokens.txt"), grid.to_text())?;
    println!("tokens\t{}\nframes\t{}", grid.len(), motion.frames());
    Ok(())
}

fn cmd_evaluate(
    args: &ModelArgs,
    extractor: &Path,
    data: &Path,
    split: &str,
    opts: &EvaluateOptions,
    out: &Path,
) -> Result<()> {
    if opts.repeats == 1 {
        warn!("--repeats 1: confidence intervals are reported with zero width");
    }
    let (model, bundle, _) = load_model(args)?;
    let ex_container =
        Container::load(extractor).with_context(|| format!("loading extractor {}", extractor.display()))?;
    let ex = ContrastiveExtractor::from_container(&ex_container)?;
    let ds = load_dataset(data)?;
    let gen = TextToMotion::new(&bundle, &model, opts.strategy);
    let mut report = evaluate(&gen, &ex, ds.split(split)?, opts)?;
    report.meta.insert(0, ("split".into(), split.to_string()));
    report.meta.push(("extractor_checkpoint".into(), ex_container.fingerprint()));
    report.meta.push(("generator_path".into(), args.checkpoint.display().to_string()));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let csv = report.to_csv();
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}
