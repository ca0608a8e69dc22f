//! Exact multiple-choice knapsack: best-first branch and bound with a convex
//! hull LP bound, plus an enumeration oracle.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{SelectionProblem, SelectionSolution};
use crate::error::{Error, Result};

pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// Candidate after integer scaling, pointing back into the problem.
#[derive(Debug, Clone)]
struct Item {
    orig: usize,
    omega: f64,
    energy: u64,
}

struct Scaled<'p> {
    problem: &'p SelectionProblem,
    /// Per layer candidates.
    layers: Vec<Vec<Item>>,
    total_exact: u64,
    budget: u64,
}

/// `floor(r · s)` computed exactly from the binary expansion of `r`.
pub(crate) fn floor_ratio(r: f64, s: u64) -> u64 {
    debug_assert!(r > 0.0 && r.is_finite());
    let bits = r.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    };
    let prod = mant as u128 * s as u128;
    let v = if e >= 0 {
        prod.checked_shl(e as u32).unwrap_or(u128::MAX)
    } else if -e >= 128 {
        0
    } else {
        prod >> (-e) as u32
    };
    v.min(u64::MAX as u128) as u64
}

impl<'p> Scaled<'p> {
    fn new(problem: &'p SelectionProblem) -> Result<Self> {
        problem.validate()?;
        let total: f64 = problem.layers.iter().map(|l| l.exact_energy).sum();
        let unit = total * 1e-9;
        let q = |e: f64| (e / unit).round() as u64;
        let layers: Vec<Vec<Item>> = problem
            .layers
            .iter()
            .map(|l| {
                l.candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| Item {
                        orig: i,
                        omega: c.omega,
                        energy: q(c.energy),
                    })
                    .collect()
            })
            .collect();
        let total_exact: u64 = problem.layers.iter().map(|l| q(l.exact_energy)).sum();
        let budget = floor_ratio(problem.ratio, total_exact);
        let scaled = Scaled {
            problem,
            layers,
            total_exact,
            budget,
        };
        let min: u64 = scaled
            .layers
            .iter()
            .map(|l| l.iter().map(|c| c.energy).min().unwrap())
            .sum();
        if min > budget {
            return Err(Error::Infeasible {
                requested: problem.ratio,
                minimum: min as f64 / total_exact as f64,
            });
        }
        Ok(scaled)
    }

    fn name(&self, layer: usize, item: &Item) -> &str {
        &self.problem.layers[layer].candidates[item.orig].name
    }

    fn solution(&self, picks: &[usize], optimal: bool, nodes: u64) -> SelectionSolution {
        let mut objective = 0.0;
        let mut energy = 0.0;
        let mut scaled = 0u64;
        for (l, &c) in picks.iter().enumerate() {
            let cand = &self.problem.layers[l].candidates[c];
            objective += cand.omega;
            energy += cand.energy;
            scaled += self.layers[l].iter().find(|i| i.orig == c).unwrap().energy;
        }
        SelectionSolution {
            choices: picks.to_vec(),
            names: picks
                .iter()
                .enumerate()
                .map(|(l, &c)| self.problem.layers[l].candidates[c].name.clone())
                .collect(),
            objective,
            energy,
            exact_energy: self.problem.layers.iter().map(|l| l.exact_energy).sum(),
            ratio: scaled as f64 / self.total_exact as f64,
            scaled_energy: scaled,
            scaled_budget: self.budget,
            scaled_exact: self.total_exact,
            optimal,
            nodes,
        }
    }
}

/// Tie order on complete assignments: objective, then energy, then names.
fn better(a: (f64, u64, &[&str]), b: (f64, u64, &[&str])) -> bool {
    match a.0.total_cmp(&b.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match a.1.cmp(&b.1) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => a.2 < b.2,
        },
    }
}

/// Enumerate every assignment (test oracle).
pub fn solve_exhaustive(problem: &SelectionProblem) -> Result<SelectionSolution> {
    let size: u128 = problem
        .layers
        .iter()
        .map(|l| l.candidates.len() as u128)
        .try_fold(1u128, |acc, n| acc.checked_mul(n))
        .unwrap_or(u128::MAX);
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge(size));
    }
    let s = Scaled::new(problem)?;
    let n = s.layers.len();
    let mut idx = vec![0usize; n];
    let mut best: Option<(f64, u64, Vec<usize>)> = None;
    let mut nodes = 0u64;
    loop {
        nodes += 1;
        let energy: u64 = idx.iter().enumerate().map(|(l, &i)| s.layers[l][i].energy).sum();
        if energy <= s.budget {
            let obj = idx
                .iter()
                .enumerate()
                .fold(0.0, |acc, (l, &i)| acc + s.layers[l][i].omega);
            let names: Vec<&str> = idx.iter().enumerate().map(|(l, &i)| s.name(l, &s.layers[l][i])).collect();
            let replace = match &best {
                None => true,
                Some((bo, be, bi)) => {
                    let bn: Vec<&str> = bi.iter().enumerate().map(|(l, &i)| s.name(l, &s.layers[l][i])).collect();
                    better((obj, energy, &names), (*bo, *be, &bn))
                }
            };
            if replace {
                best = Some((obj, energy, idx.clone()));
            }
        }
        // odometer
        let mut l = n;
        loop {
            if l == 0 {
                let (_, _, picks) = best.expect("feasible instance has a solution");
                let orig: Vec<usize> = picks.iter().enumerate().map(|(l, &i)| s.layers[l][i].orig).collect();
                return Ok(s.solution(&orig, true, nodes));
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < s.layers[l].len() {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// Lower convex hull of one layer's (energy, omega) points as a start point
/// plus segments of decreasing slope steepness.
struct Hull {
    base_energy: u64,
    base_omega: f64,
    /// `(Δenergy, Δomega)` with `Δomega < 0`, steepest first.
    segments: Vec<(u64, f64)>,
}

fn hull(items: &[Item]) -> Hull {
    let mut pts: Vec<(u64, f64)> = items.iter().map(|i| (i.energy, i.omega)).collect();
    pts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // min omega per energy, then keep only strictly decreasing omega
    let mut frontier: Vec<(u64, f64)> = Vec::new();
    for p in pts {
        if frontier.last().is_some_and(|l| l.0 == p.0) {
            continue;
        }
        if frontier.last().is_some_and(|l| l.1 <= p.1) {
            continue;
        }
        frontier.push(p);
    }
    let mut h: Vec<(u64, f64)> = Vec::new();
    for p in frontier {
        while h.len() >= 2 {
            let (a, b) = (h[h.len() - 2], h[h.len() - 1]);
            // drop b if it lies on or above segment a-p
            let cross = (b.0 as f64 - a.0 as f64) * (p.1 - a.1) - (b.1 - a.1) * (p.0 as f64 - a.0 as f64);
            if cross <= 0.0 {
                h.pop();
            } else {
                break;
            }
        }
        h.push(p);
    }
    Hull {
        base_energy: h[0].0,
        base_omega: h[0].1,
        segments: h.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect(),
    }
}

/// Precomputed LP relaxation data for each suffix of layers.
struct SuffixBound {
    base_energy: u64,
    base_omega: f64,
    /// Segments of all suffix layers, steepest first.
    segments: Vec<(u64, f64)>,
}

impl SuffixBound {
    fn bound(&self, budget: u64) -> Option<f64> {
        if self.base_energy > budget {
            return None;
        }
        let mut left = budget - self.base_energy;
        let mut omega = self.base_omega;
        for &(de, dw) in &self.segments {
            if de <= left {
                left -= de;
                omega += dw;
            } else {
                omega += dw * (left as f64 / de as f64);
                break;
            }
        }
        Some(omega)
    }
}

#[derive(Debug)]
struct Node {
    bound: f64,
    depth: usize,
    omega: f64,
    energy: u64,
    picks: Vec<usize>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: smallest bound first, then deepest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(self.depth.cmp(&other.depth))
            .then(other.picks.cmp(&self.picks))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Discard candidates dominated within their layer before searching.
    pub dominance: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { dominance: true }
    }
}

fn prune_dominated(layer: usize, s: &Scaled<'_>, items: &[Item]) -> Vec<Item> {
    let mut sorted: Vec<&Item> = items.iter().collect();
    sorted.sort_by(|a, b| {
        a.energy
            .cmp(&b.energy)
            .then(a.omega.total_cmp(&b.omega))
            .then(s.name(layer, a).cmp(s.name(layer, b)))
    });
    let mut kept: Vec<Item> = Vec::new();
    let mut best_omega = f64::INFINITY;
    for it in sorted {
        // anything earlier has energy <= ours; keep only strict omega improvements
        if it.omega < best_omega {
            best_omega = it.omega;
            kept.push(it.clone());
        }
    }
    kept
}

/// Globally optimal assignment under the energy budget.
pub fn solve(problem: &SelectionProblem) -> Result<SelectionSolution> {
    solve_with(problem, SolveOptions::default())
}

pub fn solve_with(problem: &SelectionProblem, opts: SolveOptions) -> Result<SelectionSolution> {
    let mut s = Scaled::new(problem)?;
    if opts.dominance {
        let pruned: Vec<Vec<Item>> = s
            .layers
            .iter()
            .enumerate()
            .map(|(l, items)| prune_dominated(l, &s, items))
            .collect();
        s.layers = pruned;
    }
    let n = s.layers.len();
    let hulls: Vec<Hull> = s.layers.iter().map(|l| hull(l)).collect();
    let mut suffix: Vec<SuffixBound> = Vec::with_capacity(n + 1);
    for d in 0..=n {
        let hs = &hulls[d..];
        let mut segments: Vec<(u64, f64)> = hs.iter().flat_map(|h| h.segments.iter().copied()).collect();
        segments.sort_by(|a, b| (a.1 / a.0 as f64).total_cmp(&(b.1 / b.0 as f64)));
        suffix.push(SuffixBound {
            base_energy: hs.iter().map(|h| h.base_energy).sum(),
            base_omega: hs.iter().map(|h| h.base_omega).sum(),
            segments,
        });
    }
    // incumbent: cheapest candidate per layer is always feasible
    let mut best_picks: Vec<usize> = s
        .layers
        .iter()
        .map(|l| {
            (0..l.len())
                .min_by(|&a, &b| l[a].energy.cmp(&l[b].energy).then(l[a].omega.total_cmp(&l[b].omega)))
                .unwrap()
        })
        .collect();
    let eval = |picks: &[usize]| -> (f64, u64) {
        picks.iter().enumerate().fold((0.0, 0), |(o, e), (l, &i)| {
            (o + s.layers[l][i].omega, e + s.layers[l][i].energy)
        })
    };
    let names_of = |picks: &[usize]| -> Vec<&str> {
        picks
            .iter()
            .enumerate()
            .map(|(l, &i)| s.name(l, &s.layers[l][i]))
            .collect()
    };
    let (mut best_obj, mut best_energy) = eval(&best_picks);
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: suffix[0].bound(s.budget).unwrap(),
        depth: 0,
        omega: 0.0,
        energy: 0,
        picks: Vec::new(),
    });
    let mut nodes = 0u64;
    let slack = |best: f64| 1e-12 * (1.0 + best.abs());
    while let Some(node) = heap.pop() {
        nodes += 1;
        if node.bound > best_obj + slack(best_obj) {
            break;
        }
        if node.depth == n {
            let names = names_of(&node.picks);
            if better((node.omega, node.energy, &names), (best_obj, best_energy, &names_of(&best_picks))) {
                best_obj = node.omega;
                best_energy = node.energy;
                best_picks = node.picks;
            }
            continue;
        }
        let d = node.depth;
        for (i, it) in s.layers[d].iter().enumerate() {
            let energy = node.energy + it.energy;
            if energy > s.budget {
                continue;
            }
            let omega = node.omega + it.omega;
            let Some(rest) = suffix[d + 1].bound(s.budget - energy) else {
                continue;
            };
            let bound = omega + rest;
            if bound > best_obj + slack(best_obj) {
                continue;
            }
            let mut picks = node.picks.clone();
            picks.push(i);
            heap.push(Node {
                bound,
                depth: d + 1,
                omega,
                energy,
                picks,
            });
        }
    }
    let orig: Vec<usize> = best_picks.iter().enumerate().map(|(l, &i)| s.layers[l][i].orig).collect();
    Ok(s.solution(&orig, true, nodes))
}
