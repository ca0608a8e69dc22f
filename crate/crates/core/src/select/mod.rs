//! Per-layer multiplier selection under an energy-ratio budget.
//!
//! Minimize `Σ_k p_k(choice_k)` subject to
//! `Σ_k energy_k(choice_k) ≤ R · Σ_k energy_k(exact)`, one choice per layer.
//! Energies are compared as integers at `1e-9` of the total exact energy so
//! the budget test is exact.

mod solver;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use solver::{solve, solve_exhaustive, solve_with, SolveOptions, EXHAUSTIVE_LIMIT};

use crate::error::{Error, Result};
use crate::mullib::MultiplierLibrary;
use crate::netsim::{Assignment, LayerShape};
use crate::perturb::{LayerTable, PerturbationTable, TableEntry};

/// `pdp · N_O · H · W · N_I · H_K · W_K`, per input sample.
pub fn layer_energy(shape: &LayerShape, pdp: f64) -> Result<f64> {
    if !(pdp > 0.0 && pdp.is_finite()) {
        return Err(Error::InvalidArgument(format!("pdp must be positive, got {pdp}")));
    }
    if shape.macs() == 0 {
        return Err(Error::Shape("layer with no multiplications".into()));
    }
    Ok(pdp * shape.macs() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub omega: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoices {
    pub layer: usize,
    pub candidates: Vec<Candidate>,
    pub exact_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub layers: Vec<LayerChoices>,
    /// Energy ratio budget `R ∈ (0, 1]`.
    pub ratio: f64,
}

impl SelectionProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "energy ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("selection problem has no layers".into()));
        }
        for l in &self.layers {
            if l.candidates.is_empty() {
                return Err(Error::InvalidArgument(format!("layer {} has no candidates", l.layer)));
            }
            if !(l.exact_energy > 0.0 && l.exact_energy.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {}: bad exact energy", l.layer)));
            }
            for c in &l.candidates {
                if !(c.energy > 0.0 && c.energy.is_finite()) || !c.omega.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} candidate `{}`: energy must be positive and values finite",
                        l.layer, c.name
                    )));
                }
            }
            if !l.candidates.iter().any(|c| c.energy == l.exact_energy) {
                return Err(Error::InvalidArgument(format!(
                    "layer {} lacks its exact candidate",
                    l.layer
                )));
            }
        }
        Ok(())
    }

    pub fn with_ratio(&self, ratio: f64) -> Self {
        SelectionProblem {
            layers: self.layers.clone(),
            ratio,
        }
    }

    pub fn exact_energy(&self) -> f64 {
        self.layers.iter().map(|l| l.exact_energy).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSolution {
    /// Chosen candidate index per layer.
    pub choices: Vec<usize>,
    pub names: Vec<String>,
    /// `Σ p` of the chosen candidates, summed in layer order.
    pub objective: f64,
    pub energy: f64,
    pub exact_energy: f64,
    /// Achieved ratio on the integer energy scale; never exceeds the budget.
    pub ratio: f64,
    pub scaled_energy: u64,
    pub scaled_budget: u64,
    pub scaled_exact: u64,
    pub optimal: bool,
    /// Search nodes expanded.
    pub nodes: u64,
}

impl SelectionSolution {
    pub fn assignment(&self, problem: &SelectionProblem) -> Assignment {
        Assignment(
            problem
                .layers
                .iter()
                .zip(&self.names)
                .map(|(l, n)| (l.layer, n.clone()))
                .collect(),
        )
    }

    pub fn to_text(&self, problem: &SelectionProblem) -> String {
        let mut s = String::new();
        writeln!(s, "# selection").unwrap();
        writeln!(s, "#objective={:e}", self.objective).unwrap();
        writeln!(s, "#ratio={}", self.ratio).unwrap();
        writeln!(s, "#budget={}", problem.ratio).unwrap();
        writeln!(s, "#energy={:e}", self.energy).unwrap();
        writeln!(s, "#exact_energy={:e}", self.exact_energy).unwrap();
        writeln!(s, "#optimal={}", self.optimal).unwrap();
        writeln!(s, "layer\tmultiplier\tomega\tenergy").unwrap();
        for (l, &c) in problem.layers.iter().zip(&self.choices) {
            let cand = &l.candidates[c];
            writeln!(s, "{}\t{}\t{:e}\t{:e}", l.layer, cand.name, cand.omega, cand.energy).unwrap();
        }
        s
    }

    pub fn write(&self, problem: &SelectionProblem, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text(problem))?;
        Ok(())
    }
}

/// Layer → multiplier mapping read back from a selection file.
pub fn read_selection(path: impl AsRef<Path>) -> Result<Assignment> {
    parse_selection(&fs::read_to_string(path)?)
}

pub fn parse_selection(text: &str) -> Result<Assignment> {
    let mut out = Assignment::default();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = t.split('\t').collect();
        if !header {
            header = true;
            if cols.first() == Some(&"layer") {
                continue;
            }
        }
        let err = |msg: String| Error::TableParse { line: i + 1, msg };
        if cols.len() < 2 {
            return Err(err("expected `layer<TAB>multiplier`".into()));
        }
        let layer: usize = cols[0].parse().map_err(|_| err(format!("bad layer `{}`", cols[0])))?;
        if out.0.insert(layer, cols[1].to_string()).is_some() {
            return Err(err(format!("layer {layer} listed twice")));
        }
    }
    Ok(out)
}

/// How table scores become selection costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Use `|Ω|`: a predicted loss decrease is treated as a perturbation of
    /// the same size, so an all-exact assignment stays optimal at `R = 1`.
    #[default]
    Magnitude,
    Signed,
}

/// Combine a score table with layer shapes and library PDPs.
pub fn build_problem(
    table: &PerturbationTable,
    shapes: &[LayerShape],
    library: &MultiplierLibrary,
    ratio: f64,
    cost: CostMode,
) -> Result<SelectionProblem> {
    if table.layers.len() != shapes.len() {
        return Err(Error::Shape(format!(
            "table covers {} layers, model has {}",
            table.layers.len(),
            shapes.len()
        )));
    }
    let layers = table
        .layers
        .iter()
        .zip(shapes)
        .map(|(lt, shape)| {
            let exact = library.exact(lt.bits_a, lt.bits_b).ok_or(Error::NoCandidates {
                layer: lt.layer,
                bits_a: lt.bits_a,
                bits_b: lt.bits_b,
            })?;
            let candidates = lt
                .entries
                .iter()
                .map(|e| {
                    let m = library.resolve(&e.multiplier, lt.bits_a, lt.bits_b)?;
                    Ok(Candidate {
                        name: m.name().to_string(),
                        omega: match cost {
                            CostMode::Magnitude => e.omega.abs(),
                            CostMode::Signed => e.omega,
                        },
                        energy: layer_energy(shape, m.pdp())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerChoices {
                layer: lt.layer,
                candidates,
                exact_energy: layer_energy(shape, exact.pdp())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p = SelectionProblem { layers, ratio };
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMetric {
    L2Error,
    Mred,
}

impl BaselineMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMetric::L2Error => "l2",
            BaselineMetric::Mred => "mred",
        }
    }
}

/// Layer-independent scores: the L2 norm of the error matrix or the MRED.
pub fn baseline_tables(
    library: &MultiplierLibrary,
    layer_bits: &[(u8, u8)],
    metric: BaselineMetric,
) -> Result<PerturbationTable> {
    let layers = layer_bits
        .iter()
        .enumerate()
        .map(|(layer, &(a, b))| {
            let entries: Vec<TableEntry> = library
                .candidates(a, b)
                .map(|m| TableEntry {
                    multiplier: m.name().to_string(),
                    omega: match metric {
                        BaselineMetric::L2Error => m.error_matrix().l2_norm(),
                        BaselineMetric::Mred => m.metrics().mred,
                    },
                })
                .collect();
            if entries.is_empty() {
                return Err(Error::NoCandidates {
                    layer,
                    bits_a: a,
                    bits_b: b,
                });
            }
            Ok(LayerTable {
                layer,
                bits_a: a,
                bits_b: b,
                entries,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationTable {
        source: metric.as_str().to_string(),
        batch_size: 0,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mullib::{gen_exact, gen_truncated, LutMultiplier, Provenance};

    fn cand(name: &str, omega: f64, energy: f64) -> Candidate {
        Candidate {
            name: name.into(),
            omega,
            energy,
        }
    }

    fn two_layer(ratio: f64) -> SelectionProblem {
        SelectionProblem {
            layers: vec![
                LayerChoices {
                    layer: 0,
                    candidates: vec![cand("exact", 0.0, 10.0), cand("approx", 0.5, 5.0)],
                    exact_energy: 10.0,
                },
                LayerChoices {
                    layer: 1,
                    candidates: vec![cand("exact", 0.0, 10.0), cand("approx", 0.1, 5.0)],
                    exact_energy: 10.0,
                },
            ],
            ratio,
        }
    }

    #[test]
    fn energy_examples() {
        let ls = LayerShape {
            n_out: 2,
            n_in: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 0,
            in_h: 4,
            in_w: 4,
            out_h: 2,
            out_w: 2,
        };
        assert_eq!(layer_energy(&ls, 1.5).unwrap(), 324.0);
        assert_eq!(layer_energy(&ls, 0.75).unwrap(), 162.0);
        assert!(layer_energy(&ls, 0.0).is_err());
    }

    #[test]
    fn two_layer_example() {
        let p = two_layer(0.75);
        for sol in [solve(&p).unwrap(), solve_exhaustive(&p).unwrap()] {
            assert_eq!(sol.names, vec!["exact", "approx"]);
            assert_eq!(sol.objective, 0.1);
            assert_eq!(sol.ratio, 0.75);
        }
        let all = solve(&two_layer(1.0)).unwrap();
        assert_eq!(all.names, vec!["exact", "exact"]);
        assert_eq!(all.objective, 0.0);
        match solve(&two_layer(0.4)) {
            Err(Error::Infeasible { minimum, .. }) => assert_eq!(minimum, 0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_prefer_lower_energy_then_name() {
        let p = SelectionProblem {
            layers: vec![LayerChoices {
                layer: 0,
                candidates: vec![
                    cand("exact", 0.0, 10.0),
                    cand("b", 0.0, 6.0),
                    cand("a", 0.0, 6.0),
                    cand("c", 0.0, 8.0),
                ],
                exact_energy: 10.0,
            }],
            ratio: 1.0,
        };
        assert_eq!(solve(&p).unwrap().names, vec!["a"]);
        assert_eq!(solve_exhaustive(&p).unwrap().names, vec!["a"]);
        let unpruned = solve_with(&p, SolveOptions { dominance: false }).unwrap();
        assert_eq!(unpruned.names, vec!["a"]);
    }

    #[test]
    fn baseline_scores() {
        let mut t = gen_exact(2, 2).unwrap().table().to_vec();
        // nonzero errors -1 and +2 only
        t[4 + 1] = 0;
        t[2 * 4 + 3] = 8;
        let m = LutMultiplier::new("crafted", 2, 2, t, 0.2, Provenance::Generated).unwrap();
        let lib = MultiplierLibrary::new(vec![gen_exact(2, 2).unwrap(), m, gen_truncated(2, 2, 1).unwrap()]).unwrap();
        let l2 = baseline_tables(&lib, &[(2, 2)], BaselineMetric::L2Error).unwrap();
        assert_eq!(l2.omega(0, "exact_2x2"), Some(0.0));
        assert_eq!(l2.omega(0, "crafted"), Some(5f64.sqrt()));
        let mred = baseline_tables(&lib, &[(2, 2)], BaselineMetric::Mred).unwrap();
        assert_eq!(mred.omega(0, "exact_2x2"), Some(0.0));
        let tr = lib.get("trunc_2x2_d1").unwrap();
        assert_eq!(mred.omega(0, "trunc_2x2_d1"), Some(tr.metrics().mred));
    }

    #[test]
    fn selection_file_round_trip() {
        let p = two_layer(0.75);
        let sol = solve(&p).unwrap();
        let a = parse_selection(&sol.to_text(&p)).unwrap();
        assert_eq!(a, sol.assignment(&p));
    }
}
