use std::path::PathBuf;
use std::process::ExitCode;

use appmul::calib;
use appmul::data::Dataset;
use appmul::modelfile;
use appmul::mullib::{MultiplierLibrary, MRED_CAP};
use appmul::netsim::{Assignment, ModelGraph};
use appmul::perturb::{HessianMode, PerturbationTable};
use appmul::pipeline::{self, PipelineConfig, RunInputs};
use appmul::select::read_selection;
use appmul::train::{self, TrainConfig};
use appmul::{zoo, Error};
use clap::{Args, Parser, Subcommand};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

/// Approximate-multiplier substitution for quantized CNNs.
#[derive(Parser)]
#[command(name = "appmul", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a multiplier library.
    GenLib {
        /// Square operand widths, e.g. `2 4`.
        #[arg(required = true)]
        bitwidths: Vec<u8>,
        /// Generated candidates per width (the exact multiplier is added).
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = MRED_CAP)]
        mred_cap: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a bundled architecture in float (one-off utility).
    Train {
        #[arg(long, default_value = "lenet-small")]
        arch: String,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fold batch norms, fit quantizers and report quantized-exact accuracy.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Build the perturbation table.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Choose one multiplier per layer under the energy budget.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Calibrate a prepared model for a selection.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Test-split accuracy of a prepared model, optionally under a selection.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Estimate, select, calibrate and evaluate; writes the report directory.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

/// Configuration file plus per-field overrides.
#[derive(Args, Clone)]
struct Common {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    /// Dataset directory (else `dataset` in the config, else $APPMUL_DATA).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    hessian: Option<HessianMode>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    eval_samples: Option<usize>,
}

impl Common {
    fn config(&self) -> appmul::Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => PipelineConfig::read(path)?,
            (None, Some(seed)) => PipelineConfig::new(seed),
            (None, None) => return Err(Error::Config("pass --config or --seed".into())),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.model {
            cfg.model = Some(p.clone());
        }
        if let Some(p) = &self.library {
            cfg.library = Some(p.clone());
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(b) = self.bits {
            cfg.bits = b;
        }
        if let Some(r) = self.ratio {
            cfg.ratio = Some(r);
        }
        if let Some(h) = self.hessian {
            cfg.hessian = h;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(n) = self.eval_samples {
            cfg.eval_samples = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_data(cfg: &PipelineConfig) -> appmul::Result<(Dataset, Dataset)> {
    let dir = cfg.dataset_dir()?;
    pipeline::load_dataset(cfg.dataset_kind, &dir)
}

fn load_model(cfg: &PipelineConfig) -> appmul::Result<ModelGraph> {
    modelfile::read(cfg.model_path()?)
}

fn load_library(cfg: &PipelineConfig) -> appmul::Result<MultiplierLibrary> {
    MultiplierLibrary::read(cfg.library_path()?)
}

fn require_prepared(model: &ModelGraph) -> appmul::Result<()> {
    model.layer_bits().map(|_| ()).map_err(|e| {
        Error::Config(format!("model is not prepared ({e}); run `appmul prepare` first"))
    })
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenLib { bitwidths, count, seed, mred_cap, out } => {
            let lib = MultiplierLibrary::generate(&bitwidths, count, seed, mred_cap)?;
            lib.write(&out)?;
            println!("wrote {} multipliers to {}", lib.len(), out.display());
        }
        Command::Train { arch, common, epochs, lr, out } => {
            let cfg = common.config()?;
            let (train_set, test) = load_data(&cfg)?;
            let mut model = zoo::build(&arch, cfg.seed)?;
            let mut tc = TrainConfig { seed: cfg.seed, ..TrainConfig::default() };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(l) = lr {
                tc.lr = l;
            }
            let losses = train::train(&mut model, &train_set, &tc)?;
            modelfile::write(&model, &out)?;
            let acc = pipeline::evaluate_float(&model, &pipeline::eval_split(&test, &cfg))?;
            println!(
                "final train loss {:.4}; float test accuracy {:.2}%; wrote {}",
                losses.last().copied().unwrap_or(f64::NAN),
                acc.accuracy,
                out.display()
            );
        }
        Command::Prepare { common, out } => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            let (train_set, test) = load_data(&cfg)?;
            let sets = pipeline::sample_sets(&train_set, &cfg)?;
            let bits = cfg.bit_map(model.mul_layers().len())?;
            let prepared = pipeline::prepare(&model, &sets.calibration, &bits)?;
            modelfile::write(&prepared, &out)?;
            let test = pipeline::eval_split(&test, &cfg);
            let float = pipeline::evaluate_float(&prepared, &test)?;
            let exact = pipeline::evaluate(
                &prepared,
                &Assignment::all_exact(&prepared),
                &exact_library(&prepared)?,
                &test,
            )?;
            println!("float accuracy            {:7.2}%", float.accuracy);
            println!("quantized-exact accuracy  {:7.2}%", exact.accuracy);
            println!("wrote {}", out.display());
        }
        Command::Estimate { common, out } => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            require_prepared(&model)?;
            let library = load_library(&cfg)?;
            let (train_set, _) = load_data(&cfg)?;
            let sets = pipeline::sample_sets(&train_set, &cfg)?;
            let table = pipeline::estimate(&model, &sets.estimation, &library, &cfg)?;
            table.write(&out)?;
            println!("wrote {} scores to {}", table.len(), out.display());
        }
        Command::Select { common, table, out } => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            require_prepared(&model)?;
            let library = load_library(&cfg)?;
            let table = PerturbationTable::read(&table)?;
            let (problem, solution) = pipeline::select(&model, &table, &library, cfg.ratio()?, cfg.cost)?;
            solution.write(&problem, &out)?;
            print!("{}", solution.to_text(&problem));
        }
        Command::Calibrate { common, selection, out } => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            require_prepared(&model)?;
            let library = load_library(&cfg)?;
            let assignment = read_selection(&selection)?;
            let (train_set, _) = load_data(&cfg)?;
            let sets = pipeline::sample_sets(&train_set, &cfg)?;
            let (calibrated, state) =
                calib::calibrate(&model, &assignment, &library, &sets.calibration, &cfg.calib_config())?;
            modelfile::write(&calibrated, &out)?;
            for (k, c) in state.layers.iter().enumerate() {
                println!(
                    "layer {k}: q* {:.2}  input mre {:.4e}  gamma {:.4}  beta {:.4}",
                    c.q_star, state.input_mre[k], c.gamma, c.beta
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { common, selection } => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            let (_, test) = load_data(&cfg)?;
            let test = pipeline::eval_split(&test, &cfg);
            let e = if model.is_prepared() {
                let assignment = match &selection {
                    Some(p) => read_selection(p)?,
                    None => Assignment::all_exact(&model),
                };
                let library = match (&selection, &cfg.library) {
                    (None, None) => exact_library(&model)?,
                    _ => load_library(&cfg)?,
                };
                pipeline::evaluate(&model, &assignment, &library, &test)?
            } else {
                pipeline::evaluate_float(&model, &test)?
            };
            println!("accuracy {:.2}%  loss {:.6}  ({} samples)", e.accuracy, e.loss, test.len());
        }
        Command::Run { common } => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            let library = load_library(&cfg)?;
            let (train_set, test) = load_data(&cfg)?;
            let outcome = pipeline::run(
                &RunInputs { model: &model, library: &library, train: &train_set, test: &test },
                &cfg,
            )?;
            pipeline::write_outputs(&outcome, &cfg.output)?;
            print!("{}", outcome.report.summary());
            println!("wrote {}", cfg.output.display());
        }
    }
    Ok(())
}

/// Library holding only the exact multipliers a prepared model needs.
fn exact_library(model: &ModelGraph) -> appmul::Result<MultiplierLibrary> {
    let mut groups: Vec<u8> = model.layer_bits()?.into_iter().flat_map(|(a, b)| [a, b]).collect();
    groups.sort_unstable();
    groups.dedup();
    MultiplierLibrary::generate(&groups, 0, 0, MRED_CAP)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Infeasible { .. }) => EXIT_INFEASIBLE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
