use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub multiplier: String,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTable {
    pub layer: usize,
    pub bits_a: u8,
    pub bits_b: u8,
    pub entries: Vec<TableEntry>,
}

/// Per-layer scores of every candidate multiplier. `source` records how the
/// scores were produced (`taylor-full`, `taylor-rank-one`, `l2`, `mred`).
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTable {
    pub source: String,
    pub batch_size: usize,
    pub layers: Vec<LayerTable>,
}

impl PerturbationTable {
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn omega(&self, layer: usize, name: &str) -> Option<f64> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)?
            .entries
            .iter()
            .find(|e| e.multiplier == name)
            .map(|e| e.omega)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# perturbation table").unwrap();
        writeln!(s, "#source={}", self.source).unwrap();
        writeln!(s, "#batch_size={}", self.batch_size).unwrap();
        writeln!(s, "layer\tbits_a\tbits_b\tmultiplier\tomega").unwrap();
        for l in &self.layers {
            for e in &l.entries {
                writeln!(s, "{}\t{}\t{}\t{}\t{:e}", l.layer, l.bits_a, l.bits_b, e.multiplier, e.omega).unwrap();
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut source = None;
        let mut batch_size = None;
        let mut layers: Vec<LayerTable> = Vec::new();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| Error::TableParse { line, msg };
            let t = raw.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(meta) = t.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "source" => source = Some(v.trim().to_string()),
                        "batch_size" => {
                            batch_size = Some(v.trim().parse().map_err(|_| err(format!("bad batch size `{v}`")))?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = t.split('\t').collect();
            if !header_seen {
                if cols != ["layer", "bits_a", "bits_b", "multiplier", "omega"] {
                    return Err(err("missing column header".into()));
                }
                header_seen = true;
                continue;
            }
            if cols.len() != 5 {
                return Err(err(format!("expected 5 columns, found {}", cols.len())));
            }
            let layer: usize = cols[0].parse().map_err(|_| err(format!("bad layer `{}`", cols[0])))?;
            let a: u8 = cols[1].parse().map_err(|_| err(format!("bad bitwidth `{}`", cols[1])))?;
            let b: u8 = cols[2].parse().map_err(|_| err(format!("bad bitwidth `{}`", cols[2])))?;
            let omega: f64 = cols[4].parse().map_err(|_| err(format!("bad value `{}`", cols[4])))?;
            if !omega.is_finite() {
                return Err(err(format!("non-finite value `{}`", cols[4])));
            }
            let entry = TableEntry {
                multiplier: cols[3].to_string(),
                omega,
            };
            match layers.last_mut() {
                Some(l) if l.layer == layer => {
                    if (l.bits_a, l.bits_b) != (a, b) {
                        return Err(err(format!("layer {layer} changes bitwidth")));
                    }
                    if l.entries.iter().any(|e| e.multiplier == entry.multiplier) {
                        return Err(err(format!("duplicate entry `{}` for layer {layer}", entry.multiplier)));
                    }
                    l.entries.push(entry);
                }
                _ => {
                    if layers.iter().any(|l| l.layer == layer) {
                        return Err(err(format!("rows of layer {layer} are not contiguous")));
                    }
                    layers.push(LayerTable {
                        layer,
                        bits_a: a,
                        bits_b: b,
                        entries: vec![entry],
                    });
                }
            }
        }
        Ok(PerturbationTable {
            source: source.unwrap_or_else(|| "unknown".into()),
            batch_size: batch_size.unwrap_or(0),
            layers,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}
