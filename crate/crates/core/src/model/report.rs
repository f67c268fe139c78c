use std::fmt::Write as _;
use std::ops::Range;

use super::graph::{CostRow, LayerGraph};
use crate::tensor::Shape;
use crate::{Error, Result};

/// Header line stating the FLOP convention.
pub const FLOP_CONVENTION: &str = "FLOPs = 2 x MACs (one multiply-accumulate counts as two operations)";

/// Per-layer parameters and multiply-accumulates plus totals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub input: Shape,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    fn from_rows(input: Shape, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Self {
            input,
            rows,
            total_params,
            total_macs,
        }
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    /// Report restricted to a contiguous run of layers.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self::from_rows(self.input, self.rows[range].to_vec())
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {FLOP_CONVENTION}");
        let _ = writeln!(s, "# input {:?}", self.input);
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:<34} {:>12} {:>16}",
            "layer", "kind", "output", "params", "MACs"
        );
        for r in &self.rows {
            let out = r
                .outputs
                .iter()
                .map(|o| format!("{}x{}x{}", o[1], o[2], o[3]))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(s, "{:<10} {:<10} {:<34} {:>12} {:>16}", r.name, r.kind, out, r.params, r.macs);
        }
        let _ = writeln!(s, "total params {}", self.total_params);
        let _ = writeln!(s, "total MACs   {}", self.total_macs);
        let _ = writeln!(
            s,
            "total FLOPs  {} ({:.3} G)",
            self.total_flops(),
            self.total_flops() as f64 / 1e9
        );
        s
    }

    /// Comma-separated rows: `layer,kind,outputs,params,macs`, then totals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,outputs,params,macs\n");
        for r in &self.rows {
            let out = r
                .outputs
                .iter()
                .map(|o| format!("{}x{}x{}x{}", o[0], o[1], o[2], o[3]))
                .collect::<Vec<_>>()
                .join(";");
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, out, r.params, r.macs);
        }
        let _ = writeln!(s, "total,,,{},{}", self.total_params, self.total_macs);
        s
    }
}

/// Learnable parameters by walking every stored tensor.
pub fn count_params(graph: &LayerGraph) -> u64 {
    let mut total = 0;
    graph.visit(&mut |_, p| {
        if p.learnable() {
            total += p.numel() as u64;
        }
    });
    total
}

/// Closed-form accounting for `input`. Each row's parameter count is
/// checked against the tensors the layer actually owns.
pub fn count_flops(graph: &LayerGraph, input: Shape) -> Result<CostReport> {
    let rows = graph.cost_rows(input)?;
    for (i, r) in rows.iter().enumerate() {
        let walked = graph.enumerate_node_params(i);
        if walked != r.params {
            return Err(Error::Accounting(format!(
                "{} ({}): closed form {} params, stored tensors {}",
                r.name, r.kind, r.params, walked
            )));
        }
    }
    Ok(CostReport::from_rows(input, rows))
}
