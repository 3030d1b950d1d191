use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Variant;
use crate::error::{Error, Result};

/// Outcome of one pruning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// 1-based conv ordinal of the layer whose inputs were pruned.
    pub layer: usize,
    pub variant: Variant,
    /// Final penalty of the search; 0 when no search ran.
    pub lambda: f64,
    pub kept: usize,
    pub total: usize,
    pub support: Vec<usize>,
    pub residual_before: f64,
    pub residual_after: f64,
    pub damping: f64,
    pub orthogonality_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub layers: Vec<LayerTrace>,
}

const HEADER: &str = "layer\tvariant\tlambda\tkept\ttotal\tsupport\tresidual_before\tresidual_after\tdamping\torthogonality_ratio";

impl PruneTrace {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for t in &self.layers {
            let support: Vec<String> = t.support.iter().map(usize::to_string).collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.layer,
                t.variant,
                t.lambda,
                t.kept,
                t.total,
                support.join(","),
                t.residual_before,
                t.residual_after,
                t.damping,
                t.orthogonality_ratio
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut offset = 0;
        match lines.next() {
            Some(h) if h == HEADER => offset += h.len() + 1,
            _ => return Err(Error::parse(0, "missing trace header")),
        }
        let mut layers = Vec::new();
        for line in lines {
            let here = offset;
            offset += line.len() + 1;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(Error::parse(here, format!("expected 10 fields, found {}", f.len())));
            }
            let bad = |what: &str| Error::parse(here, format!("bad {what}"));
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
            let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(what));
            let support = if f[5].is_empty() {
                Vec::new()
            } else {
                f[5].split(',').map(|s| int(s, "support")).collect::<Result<_>>()?
            };
            layers.push(LayerTrace {
                layer: int(f[0], "layer")?,
                variant: f[1].parse().map_err(|_| bad("variant"))?,
                lambda: num(f[2], "lambda")?,
                kept: int(f[3], "kept")?,
                total: int(f[4], "total")?,
                support,
                residual_before: num(f[6], "residual_before")?,
                residual_after: num(f[7], "residual_after")?,
                damping: num(f[8], "damping")?,
                orthogonality_ratio: num(f[9], "orthogonality_ratio")?,
            });
        }
        Ok(PruneTrace { layers })
    }
}
