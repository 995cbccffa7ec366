use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use guicoder::config::RunConfig;
use guicoder::dsl;
use guicoder::gradcheck;
use guicoder::metrics::{self, dump_attention};
use guicoder::model::{load_split, Model, ModelConfig, Strategy, Trainer};
use guicoder::nn::{init_params, ModelParams};
use guicoder::render::{self, Image};
use guicoder::synth::{self, image_tensor, Split};

#[derive(Parser)]
#[command(name = "guicoder", version, about = "Screenshot to layout-program model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of screenshots and programs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on the train split; evaluates the test split after each epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a weights file, including optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log path (default: `<out>.log`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the program predicted for a screenshot.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        dump_attn: Option<PathBuf>,
        #[arg(long)]
        html: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Token error and block partitioning accuracy over a split.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report path (default: `<data>/eval.txt`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rasterize a program.
    Render {
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long)]
        html: Option<PathBuf>,
    },
    /// Print a program's blocks, one per line.
    Blockify {
        #[arg(long)]
        code: PathBuf,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting thread pool")
}

fn load_weights(path: &Path) -> Result<ModelParams<f32>> {
    ModelParams::load(path).with_context(|| format!("loading weights {}", path.display()))
}

/// Architecture from the weights, image size from the image, limits from the config.
fn model_config(params: &ModelParams<f32>, base: &ModelConfig, image_size: usize) -> Result<ModelConfig> {
    let base = ModelConfig { image_size, ..*base };
    ModelConfig::from_params(params, &base).context("weights do not match the model layout")
}

fn read_program(path: &Path) -> Result<dsl::ProgramAst> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens = dsl::tokenize(&text).with_context(|| format!("tokenizing {}", path.display()))?;
    dsl::parse(&tokens).with_context(|| format!("parsing {}", path.display()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { out, train, test, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let mut gen = cfg.gen;
            if let Some(s) = seed {
                gen.seed = s;
            }
            let manifest = synth::build_dataset(train, test, &gen, &out)?;
            println!("wrote {} train + {} test examples to {} ({})", manifest.n_train, manifest.n_test, out.display(), gen);
        }
        Command::Train { data, out, config, epochs, steps, resume, log } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            init_threads(cfg.threads)?;
            train(&cfg, &data, &out, steps, resume.as_deref(), log)?;
        }
        Command::Predict { weights, image, beam, dump_attn, html, config } => {
            let cfg = load_config(config.as_deref())?;
            init_threads(cfg.threads)?;
            let params = load_weights(&weights)?;
            let img = Image::load_ppm(&image).with_context(|| format!("reading {}", image.display()))?;
            if img.width() != img.height() {
                bail!("image must be square, got {}x{}", img.width(), img.height());
            }
            let mcfg = model_config(&params, &cfg.model, img.width() as usize)?;
            let model = Model::new(&mcfg, &params)?;
            let result = model.decode(&image_tensor(&img), Strategy::from_width(beam))?;
            let program = result.program();
            println!("{}", dsl::serialize(&program));
            if let Some(dir) = dump_attn {
                let paths = dump_attention(&result, &dir)?;
                eprintln!("wrote {} attention maps to {}", paths.len(), dir.display());
            }
            if let Some(path) = html {
                fs::write(&path, render::export_html(&program)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Eval { weights, data, beam, split, out, config } => {
            let cfg = load_config(config.as_deref())?;
            init_threads(cfg.threads)?;
            let params = load_weights(&weights)?;
            let examples = load_split(&data, split.into())?;
            let first = examples.first().context("no examples in the requested split")?;
            let mcfg = model_config(&params, &cfg.model, first.image.shape()[1])?;
            let model = Model::new(&mcfg, &params)?;
            let report = metrics::evaluate(&model, &examples, Strategy::from_width(beam))?;
            let path = out.unwrap_or_else(|| data.join("eval.txt"));
            report.save(&path)?;
            println!("{}", report.summary());
        }
        Command::Render { code, out, size, html } => {
            let ast = read_program(&code)?;
            render::render(&ast, size, size)?.save_ppm(&out)?;
            if let Some(path) = html {
                fs::write(&path, render::export_html(&ast)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Blockify { code } => {
            let ast = read_program(&code)?;
            let vocab = dsl::Vocab::canonical();
            for block in dsl::blockify(&ast.tokens())?.iter() {
                let words: Vec<&str> = block.iter().map(|&t| vocab.word(t).unwrap_or("?")).collect();
                println!("{}", words.join(" "));
            }
        }
        Command::Gradcheck { seed } => {
            let start = Instant::now();
            let results = gradcheck::run_all(seed);
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
            eprintln!("gradcheck finished in {:.1}s", start.elapsed().as_secs_f64());
            if !failed.is_empty() {
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, steps: Option<u64>, resume: Option<&Path>, log: Option<PathBuf>) -> Result<()> {
    let train_set = load_split(data, Split::Train)?;
    let test_set = load_split(data, Split::Test)?;
    let first = train_set.first().context("training split is empty")?;
    let image_size = first.image.shape()[1];
    let mut params = match resume {
        Some(path) => load_weights(path)?,
        None => {
            let mcfg = ModelConfig { image_size, ..cfg.model };
            init_params(&mcfg.param_specs(), cfg.train.seed)
        }
    };
    let mcfg = model_config(&params, &cfg.model, image_size)?;
    let trainer = Trainer::new(mcfg, cfg.train, &train_set)?;

    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening log {}", log_path.display()))?;

    let total = trainer.total_steps();
    let stop_at = steps.map_or(total, |n| (params.t + n).min(total));
    let start = Instant::now();
    let mut last_report = start;
    let mut epoch_losses = Vec::new();
    let mut last = None;
    while params.t < stop_at {
        let s = trainer.step(&mut params)?;
        writeln!(log, "{}\t{:.6}", s.step, s.loss)?;
        epoch_losses.push(s.loss);
        if s.epoch_end {
            let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            epoch_losses.clear();
            let mut line = format!("# epoch={} step={} mean_loss={:.6}", s.epoch + 1, s.step, mean);
            if !test_set.is_empty() {
                let model = Model::new(&mcfg, &params)?;
                let report = metrics::evaluate(&model, &test_set, Strategy::Greedy)?;
                line.push_str(&format!(" test_{}", report.summary().replace('\t', " test_")));
            }
            writeln!(log, "{line}")?;
            if last_report.elapsed().as_secs() >= 10 || params.t == stop_at {
                eprintln!("{line} elapsed={:.0}s", start.elapsed().as_secs_f64());
                last_report = Instant::now();
            }
        }
        last = Some(s);
    }
    params.save(out).with_context(|| format!("writing {}", out.display()))?;
    match last {
        Some(s) => println!("step={} loss={:.6} weights={}", s.step, s.loss, out.display()),
        None => println!("step={} (nothing to do) weights={}", params.t, out.display()),
    }
    Ok(())
}
