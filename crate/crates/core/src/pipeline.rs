//! End-to-end stages: prepare, estimate, select, calibrate, evaluate.
//!
//! Every stage is a pure function of its inputs and the configured seed;
//! [`run`] chains them and [`write_outputs`] persists the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{self, CalibConfig, CalibState};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::modelfile;
use crate::mullib::MultiplierLibrary;
use crate::netsim::{fold_batchnorm, Assignment, LayerQuant, ModelGraph, Simulator};
use crate::perturb::{self, HessianMode, PerturbationTable};
use crate::quant::{fit_params, QuantParams};
use crate::select::{self, CostMode, SelectionProblem, SelectionSolution};

pub const DATA_ENV: &str = "APPMUL_DATA";
pub const HISTOGRAM_BINS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Cifar10,
}

pub fn load_dataset(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => data::load_mnist_dir(dir),
        DatasetKind::Cifar10 => data::load_cifar10_dir(dir),
    }
}

fn default_bits() -> u8 {
    4
}
fn default_estimation_batch() -> usize {
    256
}
fn default_calibration_samples() -> usize {
    1024
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Run configuration, usually read from TOML. Relative paths resolve against
/// the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub library: Option<PathBuf>,
    /// Dataset directory; falls back to `$APPMUL_DATA`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub dataset_kind: DatasetKind,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Operand width of every multiplicative layer not listed in `layer_bits`.
    #[serde(default = "default_bits")]
    pub bits: u8,
    /// Per-layer override, keyed by layer ordinal.
    #[serde(default)]
    pub layer_bits: BTreeMap<String, u8>,
    /// Energy budget `R ∈ (0, 1]`.
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default)]
    pub hessian: HessianMode,
    #[serde(default)]
    pub cost: CostMode,
    #[serde(default = "default_estimation_batch")]
    pub estimation_batch: usize,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
    /// Evaluate on at most this many test samples.
    #[serde(default)]
    pub eval_samples: Option<usize>,
    #[serde(default)]
    pub calib: CalibSection,
}

/// `[calib]` table; the seed comes from the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CalibSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        CalibSection {
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
        }
    }
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("minimal config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=8).contains(&self.bits) {
            return bad(format!("bits must be in 2..=8, got {}", self.bits));
        }
        for (k, &b) in &self.layer_bits {
            if k.parse::<usize>().is_err() {
                return bad(format!("layer_bits key `{k}` is not a layer index"));
            }
            if !(2..=8).contains(&b) {
                return bad(format!("layer_bits.{k} must be in 2..=8, got {b}"));
            }
        }
        if let Some(r) = self.ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("ratio must be in (0, 1], got {r}"));
            }
        }
        if self.estimation_batch == 0 || self.calibration_samples == 0 {
            return bad("estimation_batch and calibration_samples must be positive".into());
        }
        if self.calib.batch_size == 0 || !(self.calib.lr > 0.0) {
            return bad("calib.batch_size and calib.lr must be positive".into());
        }
        Ok(())
    }

    pub fn ratio(&self) -> Result<f64> {
        self.ratio.ok_or_else(|| Error::Config("`ratio` is required for selection".into()))
    }

    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            epochs: self.calib.epochs,
            lr: self.calib.lr,
            batch_size: self.calib.batch_size,
            seed: self.seed,
            ..CalibConfig::default()
        }
    }

    /// Operand width per multiplicative layer.
    pub fn bit_map(&self, layers: usize) -> Result<Vec<u8>> {
        let mut bits = vec![self.bits; layers];
        for (k, &b) in &self.layer_bits {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("layer_bits key `{k}` is not a layer index")))?;
            if k >= layers {
                return Err(Error::Config(format!(
                    "layer_bits.{k}: model has {layers} multiplicative layers"
                )));
            }
            bits[k] = b;
        }
        Ok(bits)
    }

    pub fn dataset_dir(&self) -> Result<PathBuf> {
        self.dataset
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no dataset directory (set `dataset` or ${DATA_ENV})")))
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.model.as_deref().ok_or_else(|| Error::Config("`model` path is required".into()))
    }

    pub fn library_path(&self) -> Result<&Path> {
        self.library.as_deref().ok_or_else(|| Error::Config("`library` path is required".into()))
    }
}

/// Seeded draws from the training split: the estimation batch and the
/// calibration set are prefixes of one permutation.
#[derive(Debug, Clone)]
pub struct SampleSets {
    pub estimation: Dataset,
    pub calibration: Dataset,
}

pub fn sample_sets(train: &Dataset, cfg: &PipelineConfig) -> Result<SampleSets> {
    let need = cfg.estimation_batch.max(cfg.calibration_samples);
    if train.len() < need {
        return Err(Error::Config(format!(
            "training split has {} samples, configuration needs {need}",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    Ok(SampleSets {
        estimation: train.subset(&order[..cfg.estimation_batch]),
        calibration: train.subset(&order[..cfg.calibration_samples]),
    })
}

pub fn eval_split(test: &Dataset, cfg: &PipelineConfig) -> Dataset {
    match cfg.eval_samples {
        Some(n) if n < test.len() => test.head(n),
        _ => test.clone(),
    }
}

/// Fold batch norms and fit every quantizer with `q = 0`. Activation ranges
/// are fitted in forward order on the quantized-exact model, so each layer
/// sees the rounding of the layers before it.
pub fn prepare(model: &ModelGraph, samples: &Dataset, bits: &[u8]) -> Result<ModelGraph> {
    let mut m = fold_batchnorm(model)?;
    m.shapes()?;
    let positions = m.mul_layers();
    if bits.len() != positions.len() {
        return Err(Error::Config(format!(
            "{} bitwidths for {} multiplicative layers",
            bits.len(),
            positions.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let float_inputs = {
        let sim = Simulator::float(&m)?;
        positions
            .iter()
            .map(|&p| sim.collect_layer_inputs(samples, p))
            .collect::<Result<Vec<_>>>()?
    };
    for (k, &b) in bits.iter().enumerate() {
        let conv = m.conv_mut(k).unwrap();
        conv.calib = None;
        conv.quant = Some(LayerQuant {
            x: fit_params(&float_inputs[k], b, 0.0)?,
            w: fit_params(&conv.weights_f64(), b, 0.0)?,
        });
    }
    for k in 1..positions.len() {
        let inputs = {
            let tables = vec![crate::netsim::ProductTable::Exact; positions.len()];
            let sim = Simulator::with_tables(&m, tables)?;
            sim.collect_layer_inputs(samples, positions[k])?
        };
        let conv = m.conv_mut(k).unwrap();
        let q = conv.quant.as_mut().unwrap();
        q.x = fit_params(&inputs, q.x.bits, 0.0)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate_float(model: &ModelGraph, data: &Dataset) -> Result<Evaluation> {
    let t = Simulator::float(model)?.forward(data, false)?;
    Ok(Evaluation {
        accuracy: t.accuracy(&data.labels),
        loss: t.loss,
    })
}

pub fn evaluate(
    model: &ModelGraph,
    assignment: &Assignment,
    library: &MultiplierLibrary,
    data: &Dataset,
) -> Result<Evaluation> {
    let t = Simulator::quantized(model, assignment, library)?.forward(data, false)?;
    Ok(Evaluation {
        accuracy: t.accuracy(&data.labels),
        loss: t.loss,
    })
}

pub fn estimate(
    model: &ModelGraph,
    samples: &Dataset,
    library: &MultiplierLibrary,
    cfg: &PipelineConfig,
) -> Result<PerturbationTable> {
    Ok(perturb::build_table(model, samples, library, cfg.hessian, cfg.seed)?.0)
}

pub fn select(
    model: &ModelGraph,
    table: &PerturbationTable,
    library: &MultiplierLibrary,
    ratio: f64,
    cost: CostMode,
) -> Result<(SelectionProblem, SelectionSolution)> {
    let problem = select::build_problem(table, &model.layer_shapes()?, library, ratio, cost)?;
    let solution = select::solve(&problem)?;
    Ok((problem, solution))
}

/// Summary of `approx − exact` for one layer's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffStats {
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
    pub mre: f64,
}

fn diff_stats(approx: &[f64], exact: &[f64]) -> DiffStats {
    let n = approx.len().max(1) as f64;
    let d: Vec<f64> = approx.iter().zip(exact).map(|(a, x)| a - x).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    DiffStats {
        mean,
        std: var.sqrt(),
        max_abs: d.iter().fold(0.0, |m, v| m.max(v.abs())),
        mre: calib::mre(approx, exact),
    }
}

/// Histogram of output differences before and after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub layer: usize,
    pub edges: Vec<f64>,
    pub before: Vec<u64>,
    pub after: Vec<u64>,
}

impl Distribution {
    fn new(layer: usize, before: &[f64], after: &[f64]) -> Self {
        let span = before
            .iter()
            .chain(after)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let width = 2.0 * span / HISTOGRAM_BINS as f64;
        let edges = (0..=HISTOGRAM_BINS).map(|i| -span + width * i as f64).collect();
        let count = |d: &[f64]| {
            let mut h = vec![0u64; HISTOGRAM_BINS];
            for v in d {
                let i = (((v + span) / width).floor() as usize).min(HISTOGRAM_BINS - 1);
                h[i] += 1;
            }
            h
        };
        Distribution {
            layer,
            edges,
            before: count(before),
            after: count(after),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,before,after\n");
        for i in 0..self.before.len() {
            let _ = writeln!(
                s,
                "{:e},{:e},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.before[i],
                self.after[i]
            );
        }
        s
    }
}

/// Per-layer output statistics of `before` and `after` models against the
/// quantized-exact `reference`.
pub fn output_comparison(
    reference: &ModelGraph,
    before: &ModelGraph,
    after: &ModelGraph,
    assignment: &Assignment,
    library: &MultiplierLibrary,
    data: &Dataset,
) -> Result<Vec<(DiffStats, DiffStats, Distribution)>> {
    let exact = Simulator::quantized(reference, &Assignment::all_exact(reference), library)?;
    let pre = Simulator::quantized(before, assignment, library)?;
    let post = Simulator::quantized(after, assignment, library)?;
    reference
        .mul_layers()
        .iter()
        .enumerate()
        .map(|(k, &pos)| {
            let x = exact.collect_layer_inputs(data, pos + 1)?;
            let a = pre.collect_layer_inputs(data, pos + 1)?;
            let b = post.collect_layer_inputs(data, pos + 1)?;
            let da: Vec<f64> = a.iter().zip(&x).map(|(u, v)| u - v).collect();
            let db: Vec<f64> = b.iter().zip(&x).map(|(u, v)| u - v).collect();
            Ok((diff_stats(&a, &x), diff_stats(&b, &x), Distribution::new(k, &da, &db)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub bits: (u8, u8),
    pub multiplier: String,
    /// Estimated loss perturbation of the chosen multiplier.
    pub omega: f64,
    /// Selection cost of the chosen multiplier.
    pub cost: f64,
    pub energy: f64,
    pub exact_energy: f64,
    pub q_star: f64,
    pub gamma: f64,
    pub beta: f64,
    pub before: DiffStats,
    pub after: DiffStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub float: Option<f64>,
    pub quantized_exact: f64,
    pub approx_pre_calibration: f64,
    pub approx_post_calibration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub hessian: HessianMode,
    pub ratio_budget: f64,
    pub estimation_batch: usize,
    pub calibration_samples: usize,
    pub eval_samples: usize,
    pub layers: Vec<LayerReport>,
    pub total_energy: f64,
    pub exact_energy: f64,
    pub energy_ratio: f64,
    pub objective: f64,
    pub optimal: bool,
    pub accuracy: Accuracies,
    pub loss: Accuracies,
    pub calibration: CalibState,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {}  seed {}  hessian {}", self.model, self.seed, self.hessian);
        let _ = writeln!(
            s,
            "energy ratio {:.4} (budget {:.4}, {:.1}% saved)  objective {:.6e}",
            self.energy_ratio,
            self.ratio_budget,
            100.0 * (1.0 - self.energy_ratio),
            self.objective
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:<24} {:>12} {:>12} {:>6} {:>11} {:>11}",
            "layer", "bits", "multiplier", "omega", "energy", "q*", "mre before", "mre after"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:<24} {:>12.4e} {:>12.4e} {:>6.2} {:>11.4e} {:>11.4e}",
                l.layer,
                format!("{}x{}", l.bits.0, l.bits.1),
                l.multiplier,
                l.omega,
                l.energy,
                l.q_star,
                l.before.mre,
                l.after.mre
            );
        }
        let _ = writeln!(s);
        let a = &self.accuracy;
        if let Some(f) = a.float {
            let _ = writeln!(s, "accuracy float            {f:7.2}%");
        }
        let _ = writeln!(s, "accuracy quantized exact  {:7.2}%", a.quantized_exact);
        let _ = writeln!(s, "accuracy approx (pre)     {:7.2}%", a.approx_pre_calibration);
        let _ = writeln!(s, "accuracy approx (post)    {:7.2}%", a.approx_post_calibration);
        let _ = writeln!(
            s,
            "calibration: {} epochs, {} restarts, final lr {}",
            self.calibration.epoch_losses.len(),
            self.calibration.restarts,
            self.calibration.final_lr
        );
        s
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub prepared: ModelGraph,
    pub calibrated: ModelGraph,
    pub table: PerturbationTable,
    pub problem: SelectionProblem,
    pub solution: SelectionSolution,
    pub distributions: Vec<Distribution>,
    /// Wall-clock seconds per stage, kept out of the report so reports stay
    /// reproducible.
    pub timings: Vec<(String, f64)>,
}

/// Inputs of [`run`] already loaded into memory.
pub struct RunInputs<'a> {
    /// Float model, or a model already prepared with quantizers.
    pub model: &'a ModelGraph,
    pub library: &'a MultiplierLibrary,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

fn timed<T>(timings: &mut Vec<(String, f64)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.push((stage.to_string(), t0.elapsed().as_secs_f64()));
    log::info!("{stage}: {:.2}s", t0.elapsed().as_secs_f64());
    Ok(out)
}

/// Estimate, select, calibrate and evaluate.
pub fn run(inputs: &RunInputs<'_>, cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let ratio = cfg.ratio()?;
    let mut timings = Vec::new();
    let sets = sample_sets(inputs.train, cfg)?;
    let test = eval_split(inputs.test, cfg);
    let library = inputs.library;

    let prepared = timed(&mut timings, "prepare", || {
        if inputs.model.is_prepared() {
            Ok(inputs.model.clone())
        } else {
            let bits = cfg.bit_map(inputs.model.mul_layers().len())?;
            prepare(inputs.model, &sets.calibration, &bits)
        }
    })?;
    let table = timed(&mut timings, "estimate", || estimate(&prepared, &sets.estimation, library, cfg))?;
    let (problem, solution) =
        timed(&mut timings, "select", || select(&prepared, &table, library, ratio, cfg.cost))?;
    let assignment = solution.assignment(&problem);
    let (calibrated, state) = timed(&mut timings, "calibrate", || {
        calib::calibrate(&prepared, &assignment, library, &sets.calibration, &cfg.calib_config())
    })?;
    let (accuracy, loss, comparison) = timed(&mut timings, "evaluate", || {
        let float = evaluate_float(&prepared, &test)?;
        let exact = evaluate(&prepared, &Assignment::all_exact(&prepared), library, &test)?;
        let pre = evaluate(&prepared, &assignment, library, &test)?;
        let post = evaluate(&calibrated, &assignment, library, &test)?;
        let diag = test.head(test.len().min(cfg.calibration_samples));
        let comparison = output_comparison(&prepared, &prepared, &calibrated, &assignment, library, &diag)?;
        let pick = |f: fn(&Evaluation) -> f64| Accuracies {
            float: Some(f(&float)),
            quantized_exact: f(&exact),
            approx_pre_calibration: f(&pre),
            approx_post_calibration: f(&post),
        };
        Ok((pick(|e| e.accuracy), pick(|e| e.loss), comparison))
    })?;

    let bits = prepared.layer_bits()?;
    let mut distributions = Vec::with_capacity(comparison.len());
    let layers = comparison
        .into_iter()
        .enumerate()
        .map(|(k, (before, after, dist))| {
            distributions.push(dist);
            let lc = &problem.layers[k];
            let cand = &lc.candidates[solution.choices[k]];
            let c = state.layers[k];
            LayerReport {
                layer: k,
                bits: bits[k],
                multiplier: cand.name.clone(),
                omega: table.omega(k, &cand.name).unwrap_or(f64::NAN),
                cost: cand.omega,
                energy: cand.energy,
                exact_energy: lc.exact_energy,
                q_star: c.q_star,
                gamma: c.gamma,
                beta: c.beta,
                before,
                after,
            }
        })
        .collect();
    let report = RunReport {
        model: prepared.name.clone(),
        seed: cfg.seed,
        hessian: cfg.hessian,
        ratio_budget: ratio,
        estimation_batch: sets.estimation.len(),
        calibration_samples: sets.calibration.len(),
        eval_samples: test.len(),
        layers,
        total_energy: solution.energy,
        exact_energy: solution.exact_energy,
        energy_ratio: solution.ratio,
        objective: solution.objective,
        optimal: solution.optimal,
        accuracy,
        loss,
        calibration: state,
    };
    Ok(RunOutcome {
        report,
        prepared,
        calibrated,
        table,
        problem,
        solution,
        distributions,
        timings,
    })
}

/// Write report, summary, table, selection, calibrated model, distribution
/// CSVs and timings into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("distributions"))?;
    fs::write(dir.join("report.json"), outcome.report.to_json()?)?;
    fs::write(dir.join("summary.txt"), outcome.report.summary())?;
    outcome.table.write(dir.join("table.tsv"))?;
    outcome.solution.write(&outcome.problem, dir.join("selection.txt"))?;
    modelfile::write(&outcome.calibrated, dir.join("calibrated.amq"))?;
    for d in &outcome.distributions {
        fs::write(dir.join("distributions").join(format!("layer{}.csv", d.layer)), d.to_csv())?;
    }
    let timings: BTreeMap<&str, f64> = outcome.timings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
    Ok(())
}

/// Quantizer parameters of every layer, for display.
pub fn quant_summary(model: &ModelGraph) -> Vec<Option<(QuantParams, QuantParams)>> {
    model
        .mul_layers()
        .iter()
        .map(|&p| model.layers[p].as_conv().and_then(|c| c.quant).map(|q| (q.x, q.w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_errors() {
        let c = PipelineConfig::from_toml("seed = 7").unwrap();
        assert_eq!((c.estimation_batch, c.calibration_samples), (256, 1024));
        assert_eq!((c.calib.epochs, c.calib.lr), (5, 0.1));
        assert_eq!(c.bit_map(3).unwrap(), vec![4, 4, 4]);
        assert!(matches!(PipelineConfig::from_toml("bits = 4"), Err(Error::Config(_))));
        assert!(PipelineConfig::from_toml("seed = 1\nratio = 1.5").is_err());
        assert!(PipelineConfig::from_toml("seed = 1\nratoi = 0.5").is_err());
        let c = PipelineConfig::from_toml("seed = 1\n[layer_bits]\n0 = 8\n1 = 4\n").unwrap();
        assert_eq!(c.bit_map(2).unwrap(), vec![8, 4]);
        assert!(c.bit_map(1).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let d = Distribution::new(0, &[-1.0, 0.0, 1.0], &[0.5]);
        assert_eq!(d.before.iter().sum::<u64>(), 3);
        assert_eq!(d.after.iter().sum::<u64>(), 1);
        assert_eq!(d.edges.len(), HISTOGRAM_BINS + 1);
    }
}
