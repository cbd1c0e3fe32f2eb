//! Weight-sharing supernet storage.
//!
//! A [`WeightStore`] holds one parameter set for every `(layer, choice)` pair
//! of a search space. Candidate architectures never own weights; a
//! [`PathView`] borrows the entries named by a genome, so two genomes that agree
//! on a gene literally share that layer's tensors.
//!
//! Layer ids and choice ids:
//!
//! * `stem`, `dsconv`: single choice 0
//! * `block{i}`: the backbone gene value
//! * `neck`: the output-layer gene value
//! * `{cls,reg}.first`: `channels * 2 + first_kernel`
//! * `{cls,reg}.layer{j}`: `channels * 2 + kernel index` (skips own nothing)
//! * `{cls,reg}.final`: `channels`

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::cost::OperatorSpec;
use crate::error::{Error, Result};
use crate::space::{
    block_geometry, validate, Branch, Genome, HeadLayer, SpaceDescriptor, BACKBONE_LAYERS,
    FIRST_OUTPUT_BLOCK, HEAD_CHANNELS, HEAD_INPUT_CHANNELS, HEAD_KERNELS, HEAD_LAYERS,
    OUTPUT_LAYER_GENE, STEM_CHANNELS,
};
use crate::tensor::{param_layout, Init};

pub const MAGIC: &[u8; 4] = b"TSWS";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// The named tensors of one operator choice.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&[f32]> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.data.as_slice())
            .ok_or_else(|| Error::Shape(format!("missing parameter tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Vec<f32>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.data)
            .ok_or_else(|| Error::Shape(format!("missing parameter tensor {name}")))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerKey {
    pub layer: String,
    pub choice: u32,
}

impl LayerKey {
    pub fn new(layer: impl Into<String>, choice: u32) -> Self {
        Self { layer: layer.into(), choice }
    }
}

/// Every `(layer, choice)` key of `space` with the operator it parameterizes.
pub fn store_layout(space: &SpaceDescriptor) -> Vec<(LayerKey, OperatorSpec)> {
    let mut out = vec![
        (LayerKey::new("stem", 0), OperatorSpec::conv(3, 2, 3, STEM_CHANNELS)),
        (LayerKey::new("dsconv", 0), OperatorSpec::dsconv(3, 1, STEM_CHANNELS, STEM_CHANNELS)),
    ];
    for i in 0..BACKBONE_LAYERS {
        let geo = block_geometry(i);
        for &c in space.choices(i) {
            let ch = crate::space::BackboneChoice::from_index(c).expect("space choice");
            out.push((
                LayerKey::new(format!("block{i}"), c),
                OperatorSpec::mbconv(ch.kernel, ch.expansion, geo.stride, geo.in_channels, geo.out_channels),
            ));
        }
    }
    for &o in space.choices(OUTPUT_LAYER_GENE) {
        let cin = block_geometry(FIRST_OUTPUT_BLOCK + o as usize).out_channels;
        out.push((LayerKey::new("neck", o), OperatorSpec::neck(cin, HEAD_INPUT_CHANNELS)));
    }
    for b in Branch::BOTH {
        let s = b.first_gene();
        let nk = HEAD_KERNELS.len() as u32;
        for &ch in space.choices(s) {
            let c = HEAD_CHANNELS[ch as usize];
            for &fk in space.choices(s + 1) {
                out.push((
                    LayerKey::new(format!("{}.first", b.name()), ch * nk + fk),
                    OperatorSpec::dsconv(HEAD_KERNELS[fk as usize], 1, HEAD_INPUT_CHANNELS, c),
                ));
            }
            for j in 0..HEAD_LAYERS {
                for &l in space.choices(s + 2 + j) {
                    let Some(k) = HeadLayer::from_index(l).and_then(HeadLayer::kernel) else {
                        continue;
                    };
                    out.push((
                        LayerKey::new(format!("{}.layer{j}", b.name()), ch * nk + l),
                        OperatorSpec::dsconv(k, 1, c, c),
                    ));
                }
            }
            out.push((
                LayerKey::new(format!("{}.final", b.name()), ch),
                OperatorSpec::head_final(c, b.outputs()),
            ));
        }
    }
    out
}

/// The `(layer id, choice id)` pairs genome `g` executes, in forward order.
pub fn path_keys(g: &Genome) -> Vec<LayerKey> {
    let mut keys = vec![LayerKey::new("stem", 0), LayerKey::new("dsconv", 0)];
    for i in 0..=g.output_block() {
        keys.push(LayerKey::new(format!("block{i}"), g.backbone[i]));
    }
    keys.push(LayerKey::new("neck", g.output_layer));
    let nk = HEAD_KERNELS.len() as u32;
    for b in Branch::BOTH {
        let br = g.branch(b);
        keys.push(LayerKey::new(format!("{}.first", b.name()), br.first_choice()));
        for (j, l) in br.layers.iter().enumerate() {
            if *l != HeadLayer::Skip {
                keys.push(LayerKey::new(format!("{}.layer{j}", b.name()), br.channels * nk + l.index()));
            }
        }
        keys.push(LayerKey::new(format!("{}.final", b.name()), br.channels));
    }
    keys
}

fn init_params(seed: u64, key: &LayerKey, spec: &OperatorSpec) -> ParamSet {
    let mut h = Sha256::new();
    h.update(b"tracksearch-init");
    h.update(seed.to_le_bytes());
    h.update((key.layer.len() as u32).to_le_bytes());
    h.update(key.layer.as_bytes());
    h.update(key.choice.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    ParamSet::new(
        param_layout(spec)
            .into_iter()
            .map(|(name, dims, init)| {
                let n = dims.iter().product();
                let data = match init {
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                    Init::FanIn(fan) => {
                        let std = (1.0 / fan as f64).sqrt() as f32;
                        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
                    }
                };
                Param { name, dims, data }
            })
            .collect(),
    )
}

/// All choice weights of one search space.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    seed: u64,
    space: SpaceDescriptor,
    entries: BTreeMap<LayerKey, Arc<ParamSet>>,
}

impl WeightStore {
    /// Allocates and initializes every choice weight of `space`. Conv and
    /// fully-connected weights are Gaussian with variance `1 / fan_in`;
    /// normalization scales start at one, shifts and biases at zero.
    pub fn init(space: &SpaceDescriptor, seed: u64) -> Self {
        let entries = store_layout(space)
            .into_iter()
            .map(|(k, spec)| {
                let p = init_params(seed, &k, &spec);
                (k, Arc::new(p))
            })
            .collect();
        Self { seed, space: space.clone(), entries }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.space.fingerprint()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &LayerKey> {
        self.entries.keys()
    }

    pub fn entry(&self, layer: &str, choice: u32) -> Option<&Arc<ParamSet>> {
        self.entries.get(&LayerKey::new(layer, choice))
    }

    /// Replaces one existing entry, returning the modified store.
    pub fn with_entry(mut self, layer: &str, choice: u32, params: ParamSet) -> Result<Self> {
        let key = LayerKey::new(layer, choice);
        let old = self
            .entries
            .get(&key)
            .ok_or_else(|| Error::MissingWeights { layer: layer.into(), choice })?;
        let same_layout = old.params.len() == params.params.len()
            && old.params.iter().zip(&params.params).all(|(a, b)| a.name == b.name && a.dims == b.dims);
        if !same_layout {
            return Err(Error::Shape(format!("replacement for {layer}/{choice} has a different layout")));
        }
        self.entries.insert(key, Arc::new(params));
        Ok(self)
    }

    pub fn check_space(&self, space: &SpaceDescriptor) -> Result<()> {
        if self.space.fingerprint() != space.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }

    /// Read-only selection of the weights genome `g` executes.
    pub fn path_view(&self, g: &Genome) -> Result<PathView> {
        validate(g).map_err(Error::InvalidGenome)?;
        if !self.space.contains(g) {
            return Err(Error::OutsideSpace);
        }
        let mut layers = BTreeMap::new();
        for key in path_keys(g) {
            let p = self
                .entries
                .get(&key)
                .ok_or_else(|| Error::MissingWeights { layer: key.layer.clone(), choice: key.choice })?;
            layers.insert(key.layer, (key.choice, Arc::clone(p)));
        }
        Ok(PathView { genome: g.clone(), layers })
    }

    /// Like [`path_view`](Self::path_view), first checking the store was built
    /// for `space`.
    pub fn path_view_in(&self, space: &SpaceDescriptor, g: &Genome) -> Result<PathView> {
        self.check_space(space)?;
        self.path_view(g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let records: usize = self.entries.values().map(|p| p.params.len()).sum();
        body.extend((records as u32).to_le_bytes());
        for (k, ps) in &self.entries {
            for p in &ps.params {
                body.extend((k.layer.len() as u16).to_le_bytes());
                body.extend(k.layer.as_bytes());
                body.extend(k.choice.to_le_bytes());
                body.extend((p.name.len() as u16).to_le_bytes());
                body.extend(p.name.as_bytes());
                body.push(p.dims.len() as u8);
                for &d in &p.dims {
                    body.extend((d as u32).to_le_bytes());
                }
                for v in &p.data {
                    body.extend(v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(body.len() + 53);
        out.extend(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend(self.seed.to_le_bytes());
        out.extend(self.space.fingerprint());
        out.extend((body.len() as u64).to_le_bytes());
        out.extend(body);
        out
    }

    /// Parses a store serialized for `space`.
    pub fn from_bytes(bytes: &[u8], space: &SpaceDescriptor) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptFile("bad magic header".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let seed = r.u64()?;
        if r.take(32)? != space.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        let body_len = r.u64()? as usize;
        if r.remaining() != body_len {
            return Err(Error::CorruptFile(format!(
                "body is {} bytes, header declares {body_len}",
                r.remaining()
            )));
        }
        let records = r.u32()?;
        let mut groups: BTreeMap<LayerKey, Vec<Param>> = BTreeMap::new();
        for _ in 0..records {
            let n = r.u16()? as usize;
            let layer = r.string(n)?;
            let choice = r.u32()?;
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let nd = r.u8()? as usize;
            let dims = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::CorruptFile("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            groups.entry(LayerKey { layer, choice }).or_default().push(Param { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptFile("trailing bytes after last record".into()));
        }
        let layout = store_layout(space);
        if layout.len() != groups.len() {
            return Err(Error::CorruptFile(format!(
                "{} entries present, space needs {}",
                groups.len(),
                layout.len()
            )));
        }
        let mut entries = BTreeMap::new();
        for (key, spec) in layout {
            let params = groups
                .remove(&key)
                .ok_or_else(|| Error::CorruptFile(format!("missing entry {}/{}", key.layer, key.choice)))?;
            let want = param_layout(&spec);
            let ok = want.len() == params.len()
                && want.iter().zip(&params).all(|((n, d, _), p)| *n == p.name && *d == p.dims);
            if !ok {
                return Err(Error::CorruptFile(format!("entry {}/{} has the wrong layout", key.layer, key.choice)));
            }
            entries.insert(key, Arc::new(ParamSet::new(params)));
        }
        Ok(Self { seed, space: space.clone(), entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, space: &SpaceDescriptor) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, space)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::CorruptFile(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptFile("non-utf8 identifier".into()))
    }
}

/// The weights one genome executes, borrowed from a store.
#[derive(Debug, Clone)]
pub struct PathView {
    genome: Genome,
    layers: BTreeMap<String, (u32, Arc<ParamSet>)>,
}

impl PathView {
    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn layer(&self, id: &str) -> Result<&ParamSet> {
        self.layers
            .get(id)
            .map(|(_, p)| p.as_ref())
            .ok_or_else(|| Error::MissingWeights { layer: id.to_string(), choice: u32::MAX })
    }

    /// The shared handle behind `id`, for identity comparisons.
    pub fn handle(&self, id: &str) -> Option<&Arc<ParamSet>> {
        self.layers.get(id).map(|(_, p)| p)
    }

    pub fn choice(&self, id: &str) -> Option<u32> {
        self.layers.get(id).map(|(c, _)| *c)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
