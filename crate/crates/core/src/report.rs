//! Architecture statistics for a single genome.

use serde::{Deserialize, Serialize};

use crate::cost::{cost_report, CostReport};
use crate::error::{Error, Result};
use crate::space::{validate, Branch, Genome, HeadLayer, BACKBONE_LAYERS, OUTPUT_CHOICES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub channels: usize,
    pub first_kernel: usize,
    pub layers: Vec<HeadLayer>,
    /// Non-skipped searchable layers.
    pub depth: usize,
    /// Depth plus the fixed first and final layers.
    pub total_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub schema_version: u32,
    pub backbone: Vec<String>,
    pub k7_fraction: f64,
    pub output_layer: u32,
    pub output_block: usize,
    pub output_position: String,
    pub cls: BranchReport,
    pub reg: BranchReport,
    pub cost: CostReport,
}

/// "last block", "second-last block", then "3rd-last block" and so on.
pub fn position_label(output_layer: u32) -> String {
    let from_end = OUTPUT_CHOICES - output_layer as usize;
    match from_end {
        1 => "last block".into(),
        2 => "second-last block".into(),
        3 => "3rd-last block".into(),
        n => format!("{n}th-last block"),
    }
}

fn branch_report(g: &Genome, b: Branch) -> BranchReport {
    let br = g.branch(b);
    BranchReport {
        channels: br.channel_count(),
        first_kernel: br.first_kernel_size(),
        layers: br.layers.clone(),
        depth: br.depth(),
        total_layers: br.depth() + 2,
    }
}

pub fn report(g: &Genome) -> Result<ArchReport> {
    validate(g).map_err(Error::InvalidGenome)?;
    let backbone: Vec<String> = (0..BACKBONE_LAYERS).map(|i| g.backbone_choice(i).to_string()).collect();
    let k7 = (0..BACKBONE_LAYERS).filter(|&i| g.backbone_choice(i).kernel == 7).count();
    Ok(ArchReport {
        schema_version: crate::space::SCHEMA_VERSION,
        backbone,
        k7_fraction: k7 as f64 / BACKBONE_LAYERS as f64,
        output_layer: g.output_layer,
        output_block: g.output_block(),
        output_position: position_label(g.output_layer),
        cls: branch_report(g, Branch::Cls),
        reg: branch_report(g, Branch::Reg),
        cost: cost_report(g)?,
    })
}
