//! Analytic MACs / parameter counting.
//!
//! Conventions: one MAC counts as one Flop. Every conv except the head's final
//! convs is followed by a normalization layer holding two learnable scalars per
//! channel; running statistics are not counted. Activations, pooling and
//! residual adds cost nothing, the squeeze-excitation rescale costs one MAC per
//! element. The exemplar branch reuses the backbone and neck weights, so its
//! MACs are counted and its parameters are not.

use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{
    block_geometry, validate, Branch, Genome, HeadLayer, SpaceDescriptor, BACKBONE_LAYERS,
    CLS_GENES, EXEMPLAR_SIZE, FEATURE_SIZE, HEAD_CHANNELS, HEAD_INPUT_CHANNELS, HEAD_KERNELS,
    HEAD_LAYERS, OUTPUT_LAYER_GENE, REG_GENES, SCHEMA_VERSION, SEARCH_SIZE, STEM_CHANNELS,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl Cost {
    pub const ZERO: Cost = Cost { macs: 0, params: 0 };

    pub fn new(macs: u64, params: u64) -> Self {
        Self { macs, params }
    }

    pub fn within(&self, b: &Budget) -> bool {
        self.macs <= b.flops_max && self.params <= b.params_max
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { macs: self.macs + o.macs, params: self.params + o.params }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

/// Upper bounds on MACs and parameters. Both bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub flops_max: u64,
    pub params_max: u64,
}

impl Budget {
    pub const MOBILE: Budget = Budget { flops_max: 600_000_000, params_max: 2_000_000 };
    pub const LARGE_A: Budget = Budget { flops_max: 800_000_000, params_max: 3_000_000 };
    pub const LARGE_B: Budget = Budget { flops_max: 800_000_000, params_max: 4_000_000 };

    pub fn unlimited() -> Self {
        Budget { flops_max: u64::MAX, params_max: u64::MAX }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetPreset {
    #[serde(rename = "mobile")]
    Mobile,
    #[serde(rename = "largeA")]
    LargeA,
    #[serde(rename = "largeB")]
    LargeB,
}

impl BudgetPreset {
    pub const ALL: [BudgetPreset; 3] = [BudgetPreset::Mobile, BudgetPreset::LargeA, BudgetPreset::LargeB];

    pub fn budget(self) -> Budget {
        match self {
            BudgetPreset::Mobile => Budget::MOBILE,
            BudgetPreset::LargeA => Budget::LARGE_A,
            BudgetPreset::LargeB => Budget::LARGE_B,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BudgetPreset::Mobile => "mobile",
            BudgetPreset::LargeA => "largeA",
            BudgetPreset::LargeB => "largeB",
        }
    }
}

impl FromStr for BudgetPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        BudgetPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown budget preset {s:?} (expected mobile, largeA or largeB)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpFamily {
    Conv,
    Dsconv,
    MbconvSe,
    Skip,
    Neck1x1,
    Xcorr,
    HeadFinal,
}

/// One operator instance. For `Xcorr`, `kernel` is the exemplar feature size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub family: OpFamily,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
}

impl OperatorSpec {
    pub fn conv(kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self::of(OpFamily::Conv, kernel, stride, cin, cout)
    }

    pub fn dsconv(kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self::of(OpFamily::Dsconv, kernel, stride, cin, cout)
    }

    pub fn mbconv(kernel: usize, expansion: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self { expansion, ..Self::of(OpFamily::MbconvSe, kernel, stride, cin, cout) }
    }

    pub fn skip(channels: usize) -> Self {
        Self::of(OpFamily::Skip, 1, 1, channels, channels)
    }

    pub fn neck(cin: usize, cout: usize) -> Self {
        Self::of(OpFamily::Neck1x1, 1, 1, cin, cout)
    }

    pub fn xcorr(exemplar: usize, channels: usize) -> Self {
        Self::of(OpFamily::Xcorr, exemplar, 1, channels, channels)
    }

    pub fn head_final(cin: usize, cout: usize) -> Self {
        Self::of(OpFamily::HeadFinal, 3, 1, cin, cout)
    }

    fn of(family: OpFamily, kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self { family, kernel, stride, in_channels: cin, out_channels: cout, expansion: 1 }
    }

    pub fn expanded_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    fn check(&self, input_hw: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidOperator(m));
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return bad(format!("stride {} not in {{1,2}}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("zero channels".into());
        }
        if input_hw == 0 || !input_hw.is_multiple_of(self.stride) {
            return bad(format!("input size {input_hw} incompatible with stride {}", self.stride));
        }
        if self.family == OpFamily::MbconvSe && self.expansion == 0 {
            return bad("zero expansion".into());
        }
        if self.family == OpFamily::Xcorr && self.in_channels != self.out_channels {
            return bad("cross-correlation must preserve channels".into());
        }
        Ok(())
    }
}

pub fn out_size(input_hw: usize, stride: usize) -> usize {
    input_hw.div_ceil(stride)
}

/// Squeeze-excitation bottleneck width for `expanded` channels.
pub fn se_channels(expanded: usize) -> usize {
    (expanded / 4).max(1)
}

/// conv (+ optional normalization) with `groups` groups at output size `hw_out`.
fn conv_terms(hw_out: usize, cin: usize, cout: usize, k: usize, groups: usize, norm: bool) -> Cost {
    let w = (k * k * cin / groups * cout) as u64;
    Cost {
        macs: (hw_out * hw_out) as u64 * w,
        params: w + if norm { 2 * cout as u64 } else { 0 },
    }
}

/// Cost of one operator applied to a square `input_hw` x `input_hw` input.
pub fn op_cost(spec: &OperatorSpec, input_hw: usize) -> Result<Cost> {
    spec.check(input_hw)?;
    let ho = out_size(input_hw, spec.stride);
    let (k, cin, cout) = (spec.kernel, spec.in_channels, spec.out_channels);
    Ok(match spec.family {
        OpFamily::Skip => Cost::ZERO,
        OpFamily::Conv => conv_terms(ho, cin, cout, k, 1, true),
        OpFamily::Neck1x1 => conv_terms(ho, cin, cout, 1, 1, true),
        OpFamily::HeadFinal => {
            let c = conv_terms(ho, cin, cout, k, 1, false);
            Cost { params: c.params + cout as u64, ..c }
        }
        OpFamily::Dsconv => conv_terms(ho, cin, cin, k, cin, true) + conv_terms(ho, cin, cout, 1, 1, true),
        OpFamily::MbconvSe => {
            let ce = spec.expanded_channels();
            let cr = se_channels(ce);
            let expand = conv_terms(input_hw, cin, ce, 1, 1, true);
            let depthwise = conv_terms(ho, ce, ce, k, ce, true);
            let se = Cost {
                macs: (2 * ce * cr + ho * ho * ce) as u64,
                params: (2 * ce * cr + cr + ce) as u64,
            };
            let project = conv_terms(ho, ce, cout, 1, 1, true);
            expand + depthwise + se + project
        }
        OpFamily::Xcorr => Cost { macs: (ho * ho * cin * k * k) as u64, params: 0 },
    })
}

/// One operator of a genome's realized network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealizedOp {
    pub name: String,
    pub spec: OperatorSpec,
    pub input_hw: usize,
    /// Weights already counted by an earlier op (exemplar branch reuse).
    pub shared: bool,
}

impl RealizedOp {
    pub fn cost(&self) -> Result<Cost> {
        let c = op_cost(&self.spec, self.input_hw)?;
        Ok(if self.shared { Cost { params: 0, ..c } } else { c })
    }
}

/// Channels leaving the chosen output block.
pub fn backbone_out_channels(g: &Genome) -> usize {
    block_geometry(g.output_block()).out_channels
}

fn backbone_ops(g: &Genome, prefix: &str, input: usize, shared: bool, out: &mut Vec<RealizedOp>) -> usize {
    let mut push = |name: String, spec, input_hw| out.push(RealizedOp { name, spec, input_hw, shared });
    let mut hw = input;
    push(format!("{prefix}.stem"), OperatorSpec::conv(3, 2, 3, STEM_CHANNELS), hw);
    hw = out_size(hw, 2);
    push(format!("{prefix}.dsconv"), OperatorSpec::dsconv(3, 1, STEM_CHANNELS, STEM_CHANNELS), hw);
    for i in 0..=g.output_block() {
        let geo = block_geometry(i);
        let c = g.backbone_choice(i);
        push(
            format!("{prefix}.block{i}"),
            OperatorSpec::mbconv(c.kernel, c.expansion, geo.stride, geo.in_channels, geo.out_channels),
            hw,
        );
        hw = out_size(hw, geo.stride);
    }
    push(format!("{prefix}.neck"), OperatorSpec::neck(backbone_out_channels(g), HEAD_INPUT_CHANNELS), hw);
    hw
}

/// The full operator list executed for genome `g`, in execution order.
pub fn realized_ops(g: &Genome) -> Vec<RealizedOp> {
    let mut ops = Vec::new();
    let search_hw = backbone_ops(g, "search", SEARCH_SIZE, false, &mut ops);
    let exemplar_hw = backbone_ops(g, "exemplar", EXEMPLAR_SIZE, true, &mut ops);
    debug_assert_eq!(search_hw, FEATURE_SIZE);
    ops.push(RealizedOp {
        name: "xcorr".into(),
        spec: OperatorSpec::xcorr(exemplar_hw, HEAD_INPUT_CHANNELS),
        input_hw: search_hw,
        shared: false,
    });
    for b in Branch::BOTH {
        let br = g.branch(b);
        let c = br.channel_count();
        let mut push = |name: String, spec| {
            ops.push(RealizedOp { name, spec, input_hw: FEATURE_SIZE, shared: false })
        };
        push(
            format!("{}.first", b.name()),
            OperatorSpec::dsconv(br.first_kernel_size(), 1, HEAD_INPUT_CHANNELS, c),
        );
        for (j, l) in br.layers.iter().enumerate() {
            let spec = match l.kernel() {
                Some(k) => OperatorSpec::dsconv(k, 1, c, c),
                None => OperatorSpec::skip(c),
            };
            push(format!("{}.layer{j}", b.name()), spec);
        }
        push(format!("{}.final", b.name()), OperatorSpec::head_final(c, b.outputs()));
    }
    ops
}

pub fn genome_cost(g: &Genome) -> Result<Cost> {
    validate(g).map_err(Error::InvalidGenome)?;
    realized_ops(g).iter().map(RealizedOp::cost).sum()
}

/// True iff the genome's cost is within both bounds. Invalid genomes are never feasible.
pub fn feasible(g: &Genome, b: &Budget) -> bool {
    genome_cost(g).map(|c| c.within(b)).unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub macs: u64,
    pub params: u64,
    pub per_layer: Vec<LayerCost>,
}

pub fn cost_report(g: &Genome) -> Result<CostReport> {
    validate(g).map_err(Error::InvalidGenome)?;
    let per_layer = realized_ops(g)
        .iter()
        .map(|op| op.cost().map(|c| LayerCost { name: op.name.clone(), macs: c.macs, params: c.params }))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        schema_version: SCHEMA_VERSION,
        macs: per_layer.iter().map(|l| l.macs).sum(),
        params: per_layer.iter().map(|l| l.params).sum(),
        per_layer,
    })
}

/// Componentwise minimum and maximum cost over every genome of `space`.
///
/// Once the output layer and both branch channel genes are fixed, cost is a sum
/// of independent per-gene terms, so each field is minimised (maximised) gene by
/// gene. The outer genes are enumerated.
pub fn space_extrema(space: &SpaceDescriptor) -> (Cost, Cost) {
    let mut lo = Cost { macs: u64::MAX, params: u64::MAX };
    let mut hi = Cost::ZERO;
    let inner: Vec<usize> = (0..BACKBONE_LAYERS)
        .chain([CLS_GENES + 1, REG_GENES + 1])
        .chain((0..HEAD_LAYERS).flat_map(|j| [CLS_GENES + 2 + j, REG_GENES + 2 + j]))
        .collect();
    let cost_of = |genes: &[u32; crate::space::GENE_COUNT]| {
        genome_cost(&Genome::from_genes(genes)).expect("space genomes are valid")
    };
    for &out in space.choices(OUTPUT_LAYER_GENE) {
        for &cc in space.choices(CLS_GENES) {
            for &rc in space.choices(REG_GENES) {
                let mut base = [0u32; crate::space::GENE_COUNT];
                for (p, g) in base.iter_mut().enumerate() {
                    *g = space.choices(p)[0];
                }
                base[OUTPUT_LAYER_GENE] = out;
                base[CLS_GENES] = cc;
                base[REG_GENES] = rc;
                let c0 = cost_of(&base);
                let (mut min_m, mut max_m) = (c0.macs as i128, c0.macs as i128);
                let (mut min_p, mut max_p) = (c0.params as i128, c0.params as i128);
                for &p in &inner {
                    let deltas: Vec<(i128, i128)> = space
                        .choices(p)
                        .iter()
                        .map(|&v| {
                            let mut g = base;
                            g[p] = v;
                            let c = cost_of(&g);
                            (c.macs as i128 - c0.macs as i128, c.params as i128 - c0.params as i128)
                        })
                        .collect();
                    min_m += deltas.iter().map(|d| d.0).min().unwrap();
                    max_m += deltas.iter().map(|d| d.0).max().unwrap();
                    min_p += deltas.iter().map(|d| d.1).min().unwrap();
                    max_p += deltas.iter().map(|d| d.1).max().unwrap();
                }
                lo.macs = lo.macs.min(min_m as u64);
                lo.params = lo.params.min(min_p as u64);
                hi.macs = hi.macs.max(max_m as u64);
                hi.params = hi.params.max(max_p as u64);
            }
        }
    }
    (lo, hi)
}

/// The cheapest genome of the full space: k3/e4 everywhere, earliest output
/// layer, 128-channel k3 heads with every optional layer skipped.
pub fn minimal_genome() -> Genome {
    let mut genes = [0u32; crate::space::GENE_COUNT];
    for b in [CLS_GENES, REG_GENES] {
        for j in 0..HEAD_LAYERS {
            genes[b + 2 + j] = HeadLayer::Skip.index();
        }
    }
    Genome::from_genes(&genes)
}

/// The most expensive genome of the full space: k7/e6 everywhere, last output
/// layer, 256-channel k5 heads with no skips.
pub fn maximal_genome() -> Genome {
    let mut genes = [0u32; crate::space::GENE_COUNT];
    genes[..BACKBONE_LAYERS].fill(5);
    genes[OUTPUT_LAYER_GENE] = 7;
    for b in [CLS_GENES, REG_GENES] {
        genes[b] = (HEAD_CHANNELS.len() - 1) as u32;
        genes[b + 1] = (HEAD_KERNELS.len() - 1) as u32;
        for j in 0..HEAD_LAYERS {
            genes[b + 2 + j] = HeadLayer::K5.index();
        }
    }
    Genome::from_genes(&genes)
}
