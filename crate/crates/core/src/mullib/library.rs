//! Multiplier libraries and their line-oriented text format.
//!
//! ```text
//! # comment
//! mul <name> <a> <b> <pdp_pJ> <provenance>
//! <2^b integers>      (2^a rows)
//! end
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::{
    gen_exact, gen_perturbed, gen_pruned, gen_truncated, max_output, LutMultiplier, Provenance, MRED_CAP,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MultiplierLibrary {
    entries: Vec<LutMultiplier>,
}

impl MultiplierLibrary {
    /// Build a library, checking unique names and one exact reference per bitwidth group.
    pub fn new(entries: Vec<LutMultiplier>) -> Result<Self> {
        let lib = MultiplierLibrary { entries };
        lib.validate()?;
        Ok(lib)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for m in &self.entries {
            if !names.insert(m.name()) {
                return Err(Error::DuplicateName {
                    name: m.name().to_string(),
                    line: 0,
                });
            }
        }
        for (a, b) in self.groups() {
            let exact = self
                .candidates(a, b)
                .filter(|m| m.provenance() == Provenance::Exact)
                .count();
            if exact != 1 {
                return Err(Error::InvalidArgument(format!(
                    "group {a}x{b} must contain exactly one exact multiplier, found {exact}"
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LutMultiplier] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<(u8, u8)> {
        self.entries.iter().map(|m| m.bits()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&LutMultiplier> {
        self.entries.iter().find(|m| m.name() == name)
    }

    /// Every entry for the given operand widths, in library order.
    pub fn candidates(&self, bits_a: u8, bits_b: u8) -> impl Iterator<Item = &LutMultiplier> {
        self.entries
            .iter()
            .filter(move |m| m.bits() == (bits_a, bits_b))
    }

    pub fn exact(&self, bits_a: u8, bits_b: u8) -> Option<&LutMultiplier> {
        self.candidates(bits_a, bits_b)
            .find(|m| m.provenance() == Provenance::Exact)
    }

    /// Resolve a name for a layer of the given widths; `"exact"` means the
    /// group's exact reference.
    pub fn resolve(&self, name: &str, bits_a: u8, bits_b: u8) -> Result<&LutMultiplier> {
        let m = if name == "exact" {
            self.exact(bits_a, bits_b)
        } else {
            self.get(name)
        }
        .ok_or_else(|| Error::UnknownMultiplier(name.to_string()))?;
        if m.bits() != (bits_a, bits_b) {
            return Err(Error::Assignment(format!(
                "multiplier `{}` is {}x{}, layer needs {bits_a}x{bits_b}",
                m.name(),
                m.bits_a(),
                m.bits_b()
            )));
        }
        Ok(m)
    }

    /// Standard generated library: for each square bitwidth, the exact
    /// multiplier plus `count` candidates with MRED ≤ `mred_cap` (a few
    /// truncations, one significance-pruned design, the rest seeded
    /// perturbation designs).
    pub fn generate(bitwidths: &[u8], count: usize, seed: u64, mred_cap: f64) -> Result<Self> {
        if !(mred_cap > 0.0 && mred_cap <= MRED_CAP) {
            return Err(Error::InvalidArgument(format!(
                "mred cap {mred_cap} must lie in (0, {MRED_CAP}]"
            )));
        }
        let mut entries = Vec::new();
        for &bits in bitwidths {
            entries.push(gen_exact(bits, bits)?);
            let mut produced = 0;
            let max_trunc = count / 3;
            for d in 1..2 * bits {
                if produced >= max_trunc {
                    break;
                }
                let t = gen_truncated(bits, bits, d)?;
                if t.metrics().mred > mred_cap {
                    break;
                }
                entries.push(t);
                produced += 1;
            }
            if produced < count {
                entries.push(gen_pruned(bits, bits, mred_cap)?);
                produced += 1;
            }
            let mut k = 0u64;
            while produced < count {
                let sub_seed = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(k)
                    .wrapping_add((bits as u64) << 40);
                // Spread targets over (0.2, 1.0] of the cap.
                let frac = 0.2 + 0.8 * ((k % 5) as f64 + 1.0) / 5.0;
                let m = gen_perturbed(bits, bits, sub_seed, mred_cap * frac)?;
                let m = m.with_name(format!("pert_{bits}x{bits}_{seed}_{k}"));
                entries.push(m);
                produced += 1;
                k += 1;
            }
        }
        MultiplierLibrary::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# approximate multiplier library\n");
        out.push_str("# pdp_source=proxy marks energies from the built-in proxy model, not synthesis\n");
        for m in &self.entries {
            let metrics = m.metrics();
            let source = match m.provenance() {
                Provenance::Imported => "supplied",
                _ => "proxy",
            };
            let _ = writeln!(
                out,
                "# mred={} med={} max_abs_error={} error_rate={} pdp_source={source}",
                metrics.mred, metrics.med, metrics.max_abs_error, metrics.error_rate
            );
            let _ = writeln!(
                out,
                "mul {} {} {} {} {}",
                m.name(),
                m.bits_a(),
                m.bits_b(),
                m.pdp(),
                m.provenance().as_str()
            );
            for row in m.table().chunks(m.cols()) {
                let line: Vec<String> = row.iter().map(u32::to_string).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.push_str("end\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<LutMultiplier> = Vec::new();
        let mut names = HashSet::new();
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        while let Some((line_no, line)) = lines.next() {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok[0] != "mul" {
                return Err(Error::LibraryParse {
                    line: line_no,
                    msg: format!("expected `mul`, found `{}`", tok[0]),
                });
            }
            if tok.len() != 6 {
                return Err(Error::LibraryParse {
                    line: line_no,
                    msg: format!("header needs 6 fields, found {}", tok.len()),
                });
            }
            let name = tok[1].to_string();
            let parse_bits = |s: &str| -> Result<u8> {
                s.parse::<u8>().map_err(|_| Error::LibraryParse {
                    line: line_no,
                    msg: format!("entry `{name}`: bad bitwidth `{s}`"),
                })
            };
            let bits_a = parse_bits(tok[2])?;
            let bits_b = parse_bits(tok[3])?;
            super::check_bits(bits_a)?;
            super::check_bits(bits_b)?;
            let pdp: f64 = tok[4].parse().map_err(|_| Error::LibraryParse {
                line: line_no,
                msg: format!("entry `{name}`: bad pdp `{}`", tok[4]),
            })?;
            let provenance = Provenance::parse(tok[5]).ok_or_else(|| Error::LibraryParse {
                line: line_no,
                msg: format!("entry `{name}`: unknown provenance `{}`", tok[5]),
            })?;
            if !names.insert(name.clone()) {
                return Err(Error::DuplicateName {
                    name,
                    line: line_no,
                });
            }

            let rows = 1usize << bits_a;
            let cols = 1usize << bits_b;
            let max = max_output(bits_a, bits_b);
            let mut table = Vec::with_capacity(rows * cols);
            let mut last_line = line_no;
            for r in 0..rows {
                let (row_line, row) = lines.next().ok_or_else(|| Error::LibraryParse {
                    line: last_line,
                    msg: format!("entry `{name}`: unexpected end of file in row {r}"),
                })?;
                last_line = row_line;
                if row == "end" {
                    return Err(Error::DimensionMismatch {
                        entry: name,
                        line: row_line,
                        what: "rows",
                        expected: rows,
                        found: r,
                    });
                }
                let values: Vec<&str> = row.split_whitespace().collect();
                if values.len() != cols {
                    return Err(Error::DimensionMismatch {
                        entry: name,
                        line: row_line,
                        what: "columns",
                        expected: cols,
                        found: values.len(),
                    });
                }
                for v in values {
                    let value: i64 = v.parse().map_err(|_| Error::LibraryParse {
                        line: row_line,
                        msg: format!("entry `{name}`: bad integer `{v}`"),
                    })?;
                    if value < 0 || value as u64 > max {
                        return Err(Error::EntryOutOfRange {
                            entry: name,
                            line: row_line,
                            value,
                            max,
                        });
                    }
                    table.push(value as u32);
                }
            }
            match lines.next() {
                Some((_, "end")) => {}
                Some((l, _)) => {
                    return Err(Error::DimensionMismatch {
                        entry: name,
                        line: l,
                        what: "rows",
                        expected: rows,
                        found: rows + 1,
                    })
                }
                None => {
                    return Err(Error::LibraryParse {
                        line: last_line,
                        msg: format!("entry `{name}`: missing `end`"),
                    })
                }
            }
            let m = LutMultiplier::new(name.clone(), bits_a, bits_b, table, pdp, provenance)
                .map_err(|e| Error::LibraryParse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
            entries.push(m);
        }
        MultiplierLibrary::new(entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
