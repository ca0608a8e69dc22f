//! Parametric multiplier generators and the PDP proxy model.
//!
//! All proxy PDPs are `κ·a·b · (1 − ½·f)` with κ = 0.1 pJ and `f` the fraction
//! of the `a·b` partial-product bits a design removes. They stand in for
//! synthesized figures and are labelled as proxies when written to a library.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_bits, max_output, LutMultiplier, Provenance};
use crate::error::{Error, Result};

/// Upper bound on MRED for generated candidates.
pub const MRED_CAP: f64 = 0.2;

const PDP_PER_BIT_PAIR: f64 = 0.1;

pub fn exact_pdp(bits_a: u8, bits_b: u8) -> f64 {
    PDP_PER_BIT_PAIR * bits_a as f64 * bits_b as f64
}

/// Proxy PDP for a design that removes `dropped_bits` of the `a·b` partial-product bits.
pub fn proxy_pdp(bits_a: u8, bits_b: u8, dropped_bits: usize) -> f64 {
    let total = bits_a as usize * bits_b as usize;
    let frac = dropped_bits.min(total) as f64 / total as f64;
    exact_pdp(bits_a, bits_b) * (1.0 - 0.5 * frac)
}

fn exact_table(bits_a: u8, bits_b: u8) -> Vec<u32> {
    let cols = 1usize << bits_b;
    (0..1usize << (bits_a + bits_b))
        .map(|idx| ((idx / cols) * (idx % cols)) as u32)
        .collect()
}

pub fn gen_exact(bits_a: u8, bits_b: u8) -> Result<LutMultiplier> {
    check_bits(bits_a)?;
    check_bits(bits_b)?;
    LutMultiplier::new(
        format!("exact_{bits_a}x{bits_b}"),
        bits_a,
        bits_b,
        exact_table(bits_a, bits_b),
        exact_pdp(bits_a, bits_b),
        Provenance::Exact,
    )
}

/// Clear the `drop_columns` least-significant bits of every product.
pub fn gen_truncated(bits_a: u8, bits_b: u8, drop_columns: u8) -> Result<LutMultiplier> {
    check_bits(bits_a)?;
    check_bits(bits_b)?;
    if drop_columns >= bits_a + bits_b {
        return Err(Error::InvalidArgument(format!(
            "drop_columns {drop_columns} must be < {}",
            bits_a + bits_b
        )));
    }
    if drop_columns == 0 {
        return gen_exact(bits_a, bits_b);
    }
    let mask = !((1u32 << drop_columns) - 1);
    let table = exact_table(bits_a, bits_b)
        .into_iter()
        .map(|p| p & mask)
        .collect();
    let dropped = (0..bits_a)
        .flat_map(|i| (0..bits_b).map(move |j| i + j))
        .filter(|&col| col < drop_columns)
        .count();
    LutMultiplier::new(
        format!("trunc_{bits_a}x{bits_b}_d{drop_columns}"),
        bits_a,
        bits_b,
        table,
        proxy_pdp(bits_a, bits_b, dropped),
        Provenance::Generated,
    )
}

/// Running MRED bookkeeping over a table under construction.
struct MredTracker {
    cols: usize,
    n: f64,
}

impl MredTracker {
    fn new(bits_a: u8, bits_b: u8) -> Self {
        MredTracker {
            cols: 1 << bits_b,
            n: (1u64 << (bits_a + bits_b)) as f64,
        }
    }

    fn rel(&self, idx: usize, value: i64) -> f64 {
        let exact = ((idx / self.cols) * (idx % self.cols)) as i64;
        (value - exact).unsigned_abs() as f64 / exact.max(1) as f64
    }

    fn table_mred(&self, table: &[i64]) -> f64 {
        table
            .iter()
            .enumerate()
            .map(|(idx, &v)| self.rel(idx, v))
            .sum::<f64>()
            / self.n
    }
}

/// Table obtained by removing a set of partial-product bits, optionally with a
/// constant compensation added to every product of two nonzero operands.
fn pruned_table(bits_a: u8, bits_b: u8, dropped: &[(u8, u8)], compensate: bool) -> Vec<i64> {
    let cols = 1usize << bits_b;
    let max = max_output(bits_a, bits_b) as i64;
    let comp = if compensate {
        // Expected value of the removed bits for uniform operands.
        (dropped
            .iter()
            .map(|&(i, j)| (1u64 << (i + j)) as f64 / 4.0)
            .sum::<f64>())
        .round() as i64
    } else {
        0
    };
    (0..1usize << (bits_a + bits_b))
        .map(|idx| {
            let (x, y) = (idx / cols, idx % cols);
            let mut v = (x * y) as i64;
            for &(i, j) in dropped {
                if (x >> i) & 1 == 1 && (y >> j) & 1 == 1 {
                    v -= 1 << (i + j);
                }
            }
            if x != 0 && y != 0 {
                v += comp;
            }
            v.clamp(0, max)
        })
        .collect()
}

/// Remove partial-product bits in `order`, keeping each removal only while
/// the table's MRED stays within `target_mred`.
fn greedy_prune(
    bits_a: u8,
    bits_b: u8,
    order: &[(u8, u8)],
    max_drop: usize,
    compensate: bool,
    target_mred: f64,
    tracker: &MredTracker,
) -> (Vec<(u8, u8)>, Vec<i64>) {
    let mut dropped: Vec<(u8, u8)> = Vec::new();
    let mut table = pruned_table(bits_a, bits_b, &dropped, compensate);
    for &bit in order {
        if dropped.len() >= max_drop {
            break;
        }
        dropped.push(bit);
        let candidate = pruned_table(bits_a, bits_b, &dropped, compensate);
        if tracker.table_mred(&candidate) <= target_mred {
            table = candidate;
        } else {
            dropped.pop();
        }
    }
    (dropped, table)
}

/// Deterministic compensated design: partial-product bits are removed in
/// order of significance for as long as the MRED stays within `target_mred`.
pub fn gen_pruned(bits_a: u8, bits_b: u8, target_mred: f64) -> Result<LutMultiplier> {
    check_bits(bits_a)?;
    check_bits(bits_b)?;
    if !(target_mred > 0.0 && target_mred <= MRED_CAP) {
        return Err(Error::InvalidArgument(format!(
            "target_mred {target_mred} must lie in (0, {MRED_CAP}]"
        )));
    }
    let mut order: Vec<(u8, u8)> = (0..bits_a)
        .flat_map(|i| (0..bits_b).map(move |j| (i, j)))
        .collect();
    order.sort_by_key(|&(i, j)| (i + j, j));
    let tracker = MredTracker::new(bits_a, bits_b);
    let total = bits_a as usize * bits_b as usize;
    let (dropped, table) = greedy_prune(bits_a, bits_b, &order, total - 1, true, target_mred, &tracker);
    LutMultiplier::new(
        format!("prune_{bits_a}x{bits_b}"),
        bits_a,
        bits_b,
        table.into_iter().map(|v| v as u32).collect(),
        proxy_pdp(bits_a, bits_b, dropped.len()),
        Provenance::Generated,
    )
}

/// Seeded approximate multiplier with MRED at most `target_mred`.
///
/// Removes a random, low-significance-biased subset of partial-product bits
/// (optionally with constant compensation), keeping each removal only while
/// the MRED cap holds, then applies a few small random entry perturbations
/// under the same cap. The proxy PDP reflects the removed bits.
pub fn gen_perturbed(
    bits_a: u8,
    bits_b: u8,
    seed: u64,
    target_mred: f64,
) -> Result<LutMultiplier> {
    check_bits(bits_a)?;
    check_bits(bits_b)?;
    if !(target_mred > 0.0 && target_mred <= MRED_CAP) {
        return Err(Error::InvalidArgument(format!(
            "target_mred {target_mred} must lie in (0, {MRED_CAP}]"
        )));
    }
    let stream = ((bits_a as u64) << 8) | bits_b as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let tracker = MredTracker::new(bits_a, bits_b);

    let mut bits: Vec<((u8, u8), f64)> = (0..bits_a)
        .flat_map(|i| (0..bits_b).map(move |j| (i, j)))
        .map(|(i, j)| ((i, j), (i + j) as f64 + rng.gen::<f64>() * 1.5))
        .collect();
    bits.sort_by(|a, b| a.1.total_cmp(&b.1));
    let total_bits = bits_a as usize * bits_b as usize;
    let max_drop = rng.gen_range(0..=total_bits * 5 / 8);
    let compensate = rng.gen_bool(0.5);

    let order: Vec<(u8, u8)> = bits.iter().map(|&(b, _)| b).collect();
    let (dropped, mut table) =
        greedy_prune(bits_a, bits_b, &order, max_drop, compensate, target_mred, &tracker);

    let max = max_output(bits_a, bits_b) as i64;
    let n_entries = table.len();
    let mut rel_sum = tracker.table_mred(&table) * tracker.n;
    let noise_steps = rng.gen_range(1..=n_entries / 16 + 1);
    let max_shift = ((bits_a + bits_b) / 2).saturating_sub(1) as u32;
    let mut order: Vec<usize> = (0..n_entries).collect();
    order.shuffle(&mut rng);
    for &idx in order.iter().cycle().take(noise_steps) {
        let magnitude = 1i64 << rng.gen_range(0..=max_shift);
        let delta = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
        let proposed = table[idx] + delta;
        if !(0..=max).contains(&proposed) {
            continue;
        }
        let new_sum = rel_sum - tracker.rel(idx, table[idx]) + tracker.rel(idx, proposed);
        if new_sum / tracker.n <= target_mred {
            table[idx] = proposed;
            rel_sum = new_sum;
        }
    }

    LutMultiplier::new(
        format!("pert_{bits_a}x{bits_b}_s{seed}"),
        bits_a,
        bits_b,
        table.into_iter().map(|v| v as u32).collect(),
        proxy_pdp(bits_a, bits_b, dropped.len()),
        Provenance::Generated,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_range_is_enforced() {
        assert!(matches!(gen_exact(1, 4), Err(Error::Bitwidth(1))));
        assert!(matches!(gen_exact(4, 9), Err(Error::Bitwidth(9))));
        assert!(gen_truncated(2, 2, 4).is_err());
        assert!(gen_perturbed(4, 4, 0, 0.0).is_err());
        assert!(gen_perturbed(4, 4, 0, 0.25).is_err());
    }

    #[test]
    fn pruned_design_saves_most_under_cap() {
        let p = gen_pruned(4, 4, MRED_CAP).unwrap();
        assert!(p.metrics().mred <= MRED_CAP);
        assert_eq!(p.pdp(), proxy_pdp(4, 4, 7));
        let p2 = gen_pruned(2, 2, MRED_CAP).unwrap();
        assert!(p2.pdp() < exact_pdp(2, 2));
    }

    #[test]
    fn zero_truncation_is_exact() {
        let t = gen_truncated(2, 2, 0).unwrap();
        assert_eq!(t.table(), gen_exact(2, 2).unwrap().table());
        assert!(t.is_exact());
    }

    #[test]
    fn truncation_never_overshoots() {
        for d in 0..8 {
            let t = gen_truncated(4, 4, d).unwrap();
            assert!(t.error_matrix().flat().iter().all(|&e| e <= 0));
        }
    }

    #[test]
    fn truncation_med_is_monotone() {
        let meds: Vec<f64> = (0..8)
            .map(|d| gen_truncated(4, 4, d).unwrap().metrics().med)
            .collect();
        assert!(meds.windows(2).all(|w| w[0] <= w[1]), "{meds:?}");
    }

    #[test]
    fn pdp_proxy_values() {
        assert!((exact_pdp(4, 4) - 1.6).abs() < 1e-12);
        // Dropping 3 columns of a 4x4 array removes 1 + 2 + 3 = 6 of 16 bits.
        let t = gen_truncated(4, 4, 3).unwrap();
        assert!((t.pdp() - 1.6 * (1.0 - 0.5 * 6.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn perturbed_respects_cap_and_is_deterministic() {
        for seed in 0..40 {
            let m = gen_perturbed(4, 4, seed, 0.2).unwrap();
            let mred = m.metrics().mred;
            assert!(mred > 0.0 && mred <= 0.2, "seed {seed}: {mred}");
            assert_eq!(m, gen_perturbed(4, 4, seed, 0.2).unwrap());
            assert!(m.pdp() <= exact_pdp(4, 4));
        }
    }

    #[test]
    fn tiny_budget_changes_at_most_one_entry() {
        for seed in 0..50 {
            let m = gen_perturbed(2, 2, seed, 0.01).unwrap();
            let e = m.error_matrix();
            let changed: Vec<i64> = e.flat().iter().copied().filter(|&v| v != 0).collect();
            assert!(changed.len() <= 1, "seed {seed}: {changed:?}");
            assert!(changed.iter().all(|v| v.abs() == 1));
            assert!(m.metrics().mred <= 0.01);
        }
    }
}
