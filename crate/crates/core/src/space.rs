//! The tracker search space as a genome algebra.
//!
//! A candidate tracker is a flat vector of 33 integer genes:
//!
//! | positions | meaning                                              | choices |
//! |-----------|------------------------------------------------------|---------|
//! | 0..14     | backbone MBConv block (kernel x expansion)           | 6       |
//! | 14        | output layer, one of the last eight backbone blocks  | 8       |
//! | 15, 24    | head branch channel index (128 / 192 / 256)          | 3       |
//! | 16, 25    | head branch first DSConv kernel index (3 / 5)        | 2       |
//! | 17..24    | classification head layers (k3 / k5 / skip)          | 3       |
//! | 26..33    | regression head layers (k3 / k5 / skip)              | 3       |
//!
//! Reduced spaces shrink the per-gene choice sets but keep the same layout, so
//! every downstream routine (enumeration, extrema, search) runs unchanged on them.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KERNELS: [usize; 3] = [3, 5, 7];
pub const EXPANSIONS: [usize; 2] = [4, 6];
pub const HEAD_CHANNELS: [usize; 3] = [128, 192, 256];
pub const HEAD_KERNELS: [usize; 2] = [3, 5];

pub const BACKBONE_LAYERS: usize = 14;
pub const HEAD_LAYERS: usize = 7;
pub const OUTPUT_CHOICES: usize = 8;
/// Absolute backbone index selected by `output_layer == 0`.
pub const FIRST_OUTPUT_BLOCK: usize = BACKBONE_LAYERS - OUTPUT_CHOICES;
pub const GENE_COUNT: usize = BACKBONE_LAYERS + 1 + 2 * (2 + HEAD_LAYERS);

pub const SEARCH_SIZE: usize = 256;
pub const EXEMPLAR_SIZE: usize = 112;
pub const STEM_CHANNELS: usize = 16;
pub const HEAD_INPUT_CHANNELS: usize = 128;
pub const FEATURE_SIZE: usize = 16;

pub const OUTPUT_LAYER_GENE: usize = BACKBONE_LAYERS;
pub const CLS_GENES: usize = OUTPUT_LAYER_GENE + 1;
pub const REG_GENES: usize = CLS_GENES + 2 + HEAD_LAYERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

pub const STAGES: [StageSpec; 4] = [
    StageSpec { channels: 24, repeats: 2, stride: 2 },
    StageSpec { channels: 40, repeats: 4, stride: 2 },
    StageSpec { channels: 80, repeats: 4, stride: 2 },
    StageSpec { channels: 96, repeats: 4, stride: 1 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockGeometry {
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// Fixed channel/stride layout of backbone block `index` (0..14).
pub fn block_geometry(index: usize) -> BlockGeometry {
    assert!(index < BACKBONE_LAYERS, "backbone block {index} out of range");
    let mut in_channels = STEM_CHANNELS;
    let mut i = 0;
    for stage in STAGES {
        for r in 0..stage.repeats {
            let stride = if r == 0 { stage.stride } else { 1 };
            if i == index {
                return BlockGeometry { in_channels, out_channels: stage.channels, stride };
            }
            in_channels = stage.channels;
            i += 1;
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackboneChoice {
    pub kernel: usize,
    pub expansion: usize,
}

impl BackboneChoice {
    pub const COUNT: usize = KERNELS.len() * EXPANSIONS.len();

    pub fn from_index(index: u32) -> Option<Self> {
        let i = index as usize;
        (i < Self::COUNT).then(|| Self {
            kernel: KERNELS[i / EXPANSIONS.len()],
            expansion: EXPANSIONS[i % EXPANSIONS.len()],
        })
    }

    pub fn index(&self) -> u32 {
        let k = KERNELS.iter().position(|&k| k == self.kernel).expect("kernel");
        let e = EXPANSIONS.iter().position(|&e| e == self.expansion).expect("expansion");
        (k * EXPANSIONS.len() + e) as u32
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..Self::COUNT as u32).filter_map(Self::from_index)
    }
}

impl fmt::Display for BackboneChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}e{}", self.kernel, self.expansion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadLayer {
    #[serde(rename = "k3")]
    K3,
    #[serde(rename = "k5")]
    K5,
    #[serde(rename = "skip")]
    Skip,
}

impl HeadLayer {
    pub const ALL: [HeadLayer; 3] = [HeadLayer::K3, HeadLayer::K5, HeadLayer::Skip];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    /// Kernel size, or `None` for a skip.
    pub fn kernel(self) -> Option<usize> {
        match self {
            HeadLayer::K3 => Some(3),
            HeadLayer::K5 => Some(5),
            HeadLayer::Skip => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadLayer::K3 => "k3",
            HeadLayer::K5 => "k5",
            HeadLayer::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Cls,
    Reg,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Cls, Branch::Reg];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Reg => "reg",
        }
    }

    /// Output channels of the branch's final 3x3 conv.
    pub fn outputs(self) -> usize {
        match self {
            Branch::Cls => 1,
            Branch::Reg => 4,
        }
    }

    pub(crate) fn first_gene(self) -> usize {
        match self {
            Branch::Cls => CLS_GENES,
            Branch::Reg => REG_GENES,
        }
    }
}

/// Genes of one head branch. `channels` and `first_kernel` are choice indices
/// into [`HEAD_CHANNELS`] and [`HEAD_KERNELS`]; the first layer is always a
/// DSConv, the seven following layers may be skipped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchGenes {
    pub channels: u32,
    pub first_kernel: u32,
    pub layers: Vec<HeadLayer>,
}

impl BranchGenes {
    pub fn channel_count(&self) -> usize {
        HEAD_CHANNELS[self.channels as usize]
    }

    pub fn first_kernel_size(&self) -> usize {
        HEAD_KERNELS[self.first_kernel as usize]
    }

    /// Combined (channels, first kernel) choice: one of six first-layer operators.
    pub fn first_choice(&self) -> u32 {
        self.channels * HEAD_KERNELS.len() as u32 + self.first_kernel
    }

    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| **l != HeadLayer::Skip).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genome {
    pub backbone: Vec<u32>,
    pub output_layer: u32,
    pub cls: BranchGenes,
    pub reg: BranchGenes,
}

impl Genome {
    pub fn branch(&self, b: Branch) -> &BranchGenes {
        match b {
            Branch::Cls => &self.cls,
            Branch::Reg => &self.reg,
        }
    }

    pub fn backbone_choice(&self, block: usize) -> BackboneChoice {
        BackboneChoice::from_index(self.backbone[block]).expect("validated backbone gene")
    }

    /// Absolute index of the last backbone block that is executed.
    pub fn output_block(&self) -> usize {
        FIRST_OUTPUT_BLOCK + self.output_layer as usize
    }

    /// Flat 33-gene view. Panics if list lengths are wrong; call [`validate`] first
    /// on untrusted input.
    pub fn genes(&self) -> [u32; GENE_COUNT] {
        let mut out = [0u32; GENE_COUNT];
        out[..BACKBONE_LAYERS].copy_from_slice(&self.backbone);
        out[OUTPUT_LAYER_GENE] = self.output_layer;
        for b in Branch::BOTH {
            let br = self.branch(b);
            let s = b.first_gene();
            out[s] = br.channels;
            out[s + 1] = br.first_kernel;
            for (j, l) in br.layers.iter().enumerate() {
                out[s + 2 + j] = l.index();
            }
        }
        out
    }

    pub fn from_genes(genes: &[u32; GENE_COUNT]) -> Self {
        let branch = |s: usize| BranchGenes {
            channels: genes[s],
            first_kernel: genes[s + 1],
            layers: genes[s + 2..s + 2 + HEAD_LAYERS]
                .iter()
                .map(|&i| HeadLayer::from_index(i).unwrap_or(HeadLayer::Skip))
                .collect(),
        };
        Genome {
            backbone: genes[..BACKBONE_LAYERS].to_vec(),
            output_layer: genes[OUTPUT_LAYER_GENE],
            cls: branch(CLS_GENES),
            reg: branch(REG_GENES),
        }
    }

    /// Canonical compact JSON. Equal genomes encode to identical bytes.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("genome serialization is infallible")
    }

    pub fn decode(text: &str) -> Result<Self> {
        let g: Genome = serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))?;
        if g.backbone.len() != BACKBONE_LAYERS {
            return Err(Error::WrongGeneCount {
                field: "backbone",
                expected: BACKBONE_LAYERS,
                got: g.backbone.len(),
            });
        }
        for b in Branch::BOTH {
            let n = g.branch(b).layers.len();
            if n != HEAD_LAYERS {
                return Err(Error::WrongGeneCount {
                    field: match b {
                        Branch::Cls => "cls.layers",
                        Branch::Reg => "reg.layers",
                    },
                    expected: HEAD_LAYERS,
                    got: n,
                });
            }
        }
        validate(&g).map_err(Error::InvalidGenome)?;
        Ok(g)
    }
}

impl PartialOrd for Genome {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Genome {
    fn cmp(&self, other: &Self) -> Ordering {
        self.encode().cmp(&other.encode())
    }
}

/// Human-readable name of gene position `pos`.
pub fn gene_name(pos: usize) -> String {
    match pos {
        p if p < BACKBONE_LAYERS => format!("backbone[{p}]"),
        OUTPUT_LAYER_GENE => "output_layer".to_string(),
        p => {
            let (b, s) = if p < REG_GENES { ("cls", CLS_GENES) } else { ("reg", REG_GENES) };
            match p - s {
                0 => format!("{b}.channels"),
                1 => format!("{b}.first_kernel"),
                j => format!("{b}.layers[{}]", j - 2),
            }
        }
    }
}

/// Number of choices for gene `pos` in the full space.
pub fn full_choice_count(pos: usize) -> usize {
    match pos {
        p if p < BACKBONE_LAYERS => BackboneChoice::COUNT,
        OUTPUT_LAYER_GENE => OUTPUT_CHOICES,
        p => {
            let s = if p < REG_GENES { CLS_GENES } else { REG_GENES };
            match p - s {
                0 => HEAD_CHANNELS.len(),
                1 => HEAD_KERNELS.len(),
                _ => HeadLayer::ALL.len(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    OutOfRange { value: u32, choices: usize },
    WrongCount { expected: usize, got: usize },
    OutsideSpace { value: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::OutOfRange { value, choices } => {
                write!(f, "{}: gene out of range ({value} not in [0,{choices}))", self.field)
            }
            ViolationKind::WrongCount { expected, got } => {
                write!(f, "{}: wrong gene count (expected {expected}, got {got})", self.field)
            }
            ViolationKind::OutsideSpace { value } => {
                write!(f, "{}: choice {value} not allowed in this space", self.field)
            }
        }
    }
}

/// Checks every genome invariant and returns all violations found.
pub fn validate(g: &Genome) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut range = |field: String, value: u32, choices: usize| {
        if value as usize >= choices {
            out.push(Violation { field, kind: ViolationKind::OutOfRange { value, choices } });
        }
    };
    for (i, &v) in g.backbone.iter().enumerate() {
        range(format!("backbone[{i}]"), v, BackboneChoice::COUNT);
    }
    range("output_layer".into(), g.output_layer, OUTPUT_CHOICES);
    for b in Branch::BOTH {
        let br = g.branch(b);
        range(format!("{}.channels", b.name()), br.channels, HEAD_CHANNELS.len());
        range(format!("{}.first_kernel", b.name()), br.first_kernel, HEAD_KERNELS.len());
    }
    if g.backbone.len() != BACKBONE_LAYERS {
        out.push(Violation {
            field: "backbone".into(),
            kind: ViolationKind::WrongCount { expected: BACKBONE_LAYERS, got: g.backbone.len() },
        });
    }
    for b in Branch::BOTH {
        let n = g.branch(b).layers.len();
        if n != HEAD_LAYERS {
            out.push(Violation {
                field: format!("{}.layers", b.name()),
                kind: ViolationKind::WrongCount { expected: HEAD_LAYERS, got: n },
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// One row of the human-readable space layout table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    pub section: &'static str,
    pub input: String,
    pub operator: &'static str,
    pub choices: usize,
    pub channels: String,
    pub repeats: usize,
    pub stride: usize,
}

/// A search space: the fixed layout plus per-gene allowed choice sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpaceDescriptor {
    choices: Vec<Vec<u32>>,
}

impl Default for SpaceDescriptor {
    fn default() -> Self {
        Self::full()
    }
}

impl SpaceDescriptor {
    pub fn full() -> Self {
        Self {
            choices: (0..GENE_COUNT)
                .map(|p| (0..full_choice_count(p) as u32).collect())
                .collect(),
        }
    }

    /// Builds a (possibly reduced) space. Each gene keeps a non-empty subset of
    /// its full choice set; duplicates are dropped and sets are sorted.
    pub fn from_choices(choices: Vec<Vec<u32>>) -> Result<Self> {
        if choices.len() != GENE_COUNT {
            return Err(Error::InvalidSpace(format!(
                "expected {GENE_COUNT} choice sets, got {}",
                choices.len()
            )));
        }
        let mut out = Vec::with_capacity(GENE_COUNT);
        for (p, mut set) in choices.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::InvalidSpace(format!("{} has no choices", gene_name(p))));
            }
            if let Some(&bad) = set.iter().find(|&&c| c as usize >= full_choice_count(p)) {
                return Err(Error::InvalidSpace(format!(
                    "{}: choice {bad} out of range",
                    gene_name(p)
                )));
            }
            out.push(set);
        }
        Ok(Self { choices: out })
    }

    /// The space containing only `g`.
    pub fn singleton(g: &Genome) -> Result<Self> {
        validate(g).map_err(Error::InvalidGenome)?;
        Self::from_choices(g.genes().iter().map(|&v| vec![v]).collect())
    }

    /// Replaces the choice set of gene `pos`.
    pub fn restrict(mut self, pos: usize, set: &[u32]) -> Result<Self> {
        if pos >= GENE_COUNT {
            return Err(Error::InvalidSpace(format!("gene position {pos} out of range")));
        }
        self.choices[pos] = set.to_vec();
        Self::from_choices(self.choices)
    }

    pub fn choices(&self, pos: usize) -> &[u32] {
        &self.choices[pos]
    }

    pub fn all_choices(&self) -> &[Vec<u32>] {
        &self.choices
    }

    pub fn is_full(&self) -> bool {
        *self == Self::full()
    }

    fn product(&self, range: std::ops::Range<usize>) -> u128 {
        self.choices[range].iter().map(|c| c.len() as u128).product()
    }

    pub fn backbone_cardinality(&self) -> u128 {
        self.product(0..BACKBONE_LAYERS)
    }

    pub fn output_layer_cardinality(&self) -> u128 {
        self.choices[OUTPUT_LAYER_GENE].len() as u128
    }

    pub fn head_branch_cardinality(&self, b: Branch) -> u128 {
        let s = b.first_gene();
        self.product(s..s + 2 + HEAD_LAYERS)
    }

    pub fn head_cardinality(&self) -> u128 {
        self.head_branch_cardinality(Branch::Cls) * self.head_branch_cardinality(Branch::Reg)
    }

    pub fn cardinality(&self) -> u128 {
        self.product(0..GENE_COUNT)
    }

    pub fn contains(&self, g: &Genome) -> bool {
        validate(g).is_ok() && g.genes().iter().zip(&self.choices).all(|(v, set)| set.contains(v))
    }

    /// Lists the genes of `g` that fall outside this space.
    pub fn violations(&self, g: &Genome) -> Vec<Violation> {
        if let Err(v) = validate(g) {
            return v;
        }
        g.genes()
            .iter()
            .zip(&self.choices)
            .enumerate()
            .filter(|(_, (v, set))| !set.contains(v))
            .map(|(p, (&value, _))| Violation {
                field: gene_name(p),
                kind: ViolationKind::OutsideSpace { value },
            })
            .collect()
    }

    /// SHA-256 over the choice sets; identifies the space a weight store serves.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tracksearch-space-v1");
        for set in &self.choices {
            h.update((set.len() as u32).to_le_bytes());
            for c in set {
                h.update(c.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Draws each gene independently and uniformly from its choice set.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Genome {
        let mut genes = [0u32; GENE_COUNT];
        for (g, set) in genes.iter_mut().zip(&self.choices) {
            *g = set[rng.random_range(0..set.len())];
        }
        Genome::from_genes(&genes)
    }

    /// Every genome in the space, in odometer order (last gene fastest).
    pub fn iter(&self) -> GenomeIter<'_> {
        GenomeIter { space: self, cursor: Some([0; GENE_COUNT]) }
    }

    /// The fixed layer table of the space.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let sq = |s: usize, c: &str| format!("{s}x{s}x{c}");
        let mut rows = vec![
            LayerSpec {
                section: "backbone",
                input: sq(SEARCH_SIZE, "3"),
                operator: "3x3 Conv",
                choices: 1,
                channels: STEM_CHANNELS.to_string(),
                repeats: 1,
                stride: 2,
            },
            LayerSpec {
                section: "backbone",
                input: sq(SEARCH_SIZE / 2, "16"),
                operator: "DSConv",
                choices: 1,
                channels: STEM_CHANNELS.to_string(),
                repeats: 1,
                stride: 1,
            },
        ];
        let mut hw = SEARCH_SIZE / 2;
        let mut cin = STEM_CHANNELS;
        let mut first = 0;
        for st in STAGES {
            let n = self.choices[first..first + st.repeats]
                .iter()
                .map(Vec::len)
                .max()
                .unwrap_or(0);
            rows.push(LayerSpec {
                section: "backbone",
                input: sq(hw, &cin.to_string()),
                operator: "MBConv",
                choices: n,
                channels: st.channels.to_string(),
                repeats: st.repeats,
                stride: st.stride,
            });
            hw /= st.stride;
            cin = st.channels;
            first += st.repeats;
        }
        for (b, c) in [(Branch::Cls, "C1"), (Branch::Reg, "C2")] {
            let s = b.first_gene();
            let section = match b {
                Branch::Cls => "cls_head",
                Branch::Reg => "reg_head",
            };
            rows.push(LayerSpec {
                section,
                input: sq(FEATURE_SIZE, &HEAD_INPUT_CHANNELS.to_string()),
                operator: "DSConv",
                choices: self.choices[s].len() * self.choices[s + 1].len(),
                channels: c.to_string(),
                repeats: 1,
                stride: 1,
            });
            rows.push(LayerSpec {
                section,
                input: sq(FEATURE_SIZE, c),
                operator: "DSConv / Skip",
                choices: self.choices[s + 2..s + 2 + HEAD_LAYERS]
                    .iter()
                    .map(Vec::len)
                    .max()
                    .unwrap_or(0),
                channels: c.to_string(),
                repeats: HEAD_LAYERS,
                stride: 1,
            });
            rows.push(LayerSpec {
                section,
                input: sq(FEATURE_SIZE, c),
                operator: "3x3 Conv",
                choices: 1,
                channels: b.outputs().to_string(),
                repeats: 1,
                stride: 1,
            });
        }
        rows
    }
}

pub struct GenomeIter<'a> {
    space: &'a SpaceDescriptor,
    cursor: Option<[usize; GENE_COUNT]>,
}

impl Iterator for GenomeIter<'_> {
    type Item = Genome;

    fn next(&mut self) -> Option<Genome> {
        let cur = self.cursor?;
        let mut genes = [0u32; GENE_COUNT];
        for (p, g) in genes.iter_mut().enumerate() {
            *g = self.space.choices[p][cur[p]];
        }
        let mut nxt = cur;
        let mut p = GENE_COUNT;
        self.cursor = loop {
            if p == 0 {
                break None;
            }
            p -= 1;
            nxt[p] += 1;
            if nxt[p] < self.space.choices[p].len() {
                break Some(nxt);
            }
            nxt[p] = 0;
        };
        Some(Genome::from_genes(&genes))
    }
}

impl SpaceDescriptor {
    /// [`SpaceDescriptor::sample`] with a ChaCha8 generator seeded from `seed`.
    pub fn sample_seeded(&self, seed: u64) -> Genome {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Uniform sample from the full space, deterministic in `seed`.
pub fn random_genome(seed: u64) -> Genome {
    SpaceDescriptor::full().sample_seeded(seed)
}

/// Cardinality summary of a space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpaceSummary {
    pub backbone_cardinality: u128,
    pub output_layer_choices: u128,
    pub head_branch_cardinality: [u128; 2],
    pub head_cardinality: u128,
    /// `(3 * 3^8)^2`: the count obtained when every one of the eight head
    /// layers is taken as a 3-way choice, ignoring the channel gene and the
    /// non-skippable first layer. Reported alongside the structural count.
    pub head_cardinality_eight_layer_count: u128,
    pub total_cardinality: u128,
}

pub fn describe_space(space: &SpaceDescriptor) -> SpaceSummary {
    SpaceSummary {
        backbone_cardinality: space.backbone_cardinality(),
        output_layer_choices: space.output_layer_cardinality(),
        head_branch_cardinality: [
            space.head_branch_cardinality(Branch::Cls),
            space.head_branch_cardinality(Branch::Reg),
        ],
        head_cardinality: space.head_cardinality(),
        head_cardinality_eight_layer_count: (3 * 3u128.pow(8)).pow(2),
        total_cardinality: space.cardinality(),
    }
}

/// On-disk form of a (reduced) space: allowed choices per gene, laid out like
/// the genome schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceFile {
    pub schema_version: u32,
    pub backbone: Vec<Vec<u32>>,
    pub output_layer: Vec<u32>,
    pub cls: BranchChoices,
    pub reg: BranchChoices,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchChoices {
    pub channels: Vec<u32>,
    pub first_kernel: Vec<u32>,
    pub layers: Vec<Vec<HeadLayer>>,
}

pub const SCHEMA_VERSION: u32 = 1;

impl From<&SpaceDescriptor> for SpaceFile {
    fn from(s: &SpaceDescriptor) -> Self {
        let c = &s.choices;
        let branch = |st: usize| BranchChoices {
            channels: c[st].clone(),
            first_kernel: c[st + 1].clone(),
            layers: c[st + 2..st + 2 + HEAD_LAYERS]
                .iter()
                .map(|set| set.iter().filter_map(|&i| HeadLayer::from_index(i)).collect())
                .collect(),
        };
        SpaceFile {
            schema_version: SCHEMA_VERSION,
            backbone: c[..BACKBONE_LAYERS].to_vec(),
            output_layer: c[OUTPUT_LAYER_GENE].clone(),
            cls: branch(CLS_GENES),
            reg: branch(REG_GENES),
        }
    }
}

impl TryFrom<SpaceFile> for SpaceDescriptor {
    type Error = Error;

    fn try_from(f: SpaceFile) -> Result<Self> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidSpace(format!(
                "unsupported schema_version {}",
                f.schema_version
            )));
        }
        if f.backbone.len() != BACKBONE_LAYERS {
            return Err(Error::WrongGeneCount {
                field: "backbone",
                expected: BACKBONE_LAYERS,
                got: f.backbone.len(),
            });
        }
        let mut choices = f.backbone;
        choices.push(f.output_layer);
        for (name, br) in [("cls.layers", f.cls), ("reg.layers", f.reg)] {
            if br.layers.len() != HEAD_LAYERS {
                return Err(Error::WrongGeneCount {
                    field: name,
                    expected: HEAD_LAYERS,
                    got: br.layers.len(),
                });
            }
            choices.push(br.channels);
            choices.push(br.first_kernel);
            choices.extend(
                br.layers
                    .into_iter()
                    .map(|set| set.into_iter().map(HeadLayer::index).collect()),
            );
        }
        SpaceDescriptor::from_choices(choices)
    }
}
