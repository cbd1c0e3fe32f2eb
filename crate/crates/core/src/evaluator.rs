//! Fitness functions standing in for validation tracking accuracy.
//!
//! Three implementations share the [`Evaluator`] trait: a seeded synthetic
//! landscape, an exact lookup table, and a proxy that runs the per-path
//! pipeline end to end (recalibrate normalization, infer, score localization).
//! Every evaluator is a pure function of the genome.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::space::{Genome, SpaceDescriptor, EXEMPLAR_SIZE, FEATURE_SIZE, GENE_COUNT, SEARCH_SIZE};
use crate::supernet::{ParamSet, WeightStore};
use crate::tensor::{forward_tracker, recalibrate_bn, InputPair, Tensor};

pub trait Evaluator: Sync {
    fn evaluate(&self, g: &Genome) -> Result<f64>;

    fn kind(&self) -> EvaluatorKind;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Synthetic,
    Lookup,
    Proxy,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded landscape: per-gene value tables plus interaction terms between
/// adjacent genes, affinely mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticEvaluator {
    pub seed: u64,
}

const PAIR_WEIGHT: f64 = 0.5;

impl SyntheticEvaluator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn table(&self, tag: u64, pos: usize, a: u32, b: u32) -> f64 {
        let mut h = splitmix(self.seed ^ tag.wrapping_mul(0xA24B_AED4_963E_E407));
        h = splitmix(h ^ pos as u64);
        h = splitmix(h ^ ((a as u64) << 32 | b as u64));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn score(&self, g: &Genome) -> f64 {
        let genes = g.genes();
        let unary: f64 = genes.iter().enumerate().map(|(i, &v)| self.table(1, i, v, 0)).sum();
        let pair: f64 = genes.windows(2).enumerate().map(|(i, w)| self.table(2, i, w[0], w[1])).sum();
        let max = GENE_COUNT as f64 + PAIR_WEIGHT * (GENE_COUNT - 1) as f64;
        ((unary + PAIR_WEIGHT * pair) / max).clamp(0.0, 1.0)
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&self, g: &Genome) -> Result<f64> {
        crate::space::validate(g).map_err(Error::InvalidGenome)?;
        Ok(self.score(g))
    }

    fn kind(&self) -> EvaluatorKind {
        EvaluatorKind::Synthetic
    }
}

/// Exact table of scores keyed by canonical genome encoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LookupEvaluator {
    table: HashMap<String, f64>,
}

impl LookupEvaluator {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Genome, f64)>) -> Result<Self> {
        let mut table = HashMap::new();
        for (g, s) in pairs {
            let key = g.encode();
            if table.insert(key.clone(), s).is_some() {
                return Err(Error::DuplicateKey(key));
            }
        }
        Ok(Self { table })
    }

    /// Reads a two-column CSV (`genome,score`) with a header row. Keys are
    /// decoded and re-encoded, so any valid JSON spelling is accepted.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for rec in rdr.deserialize::<(String, f64)>() {
            let (key, score) = rec?;
            pairs.push((Genome::decode(&key)?, score));
        }
        Self::from_pairs(pairs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<_> = self.table.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["genome", "score"])?;
        for (k, v) in rows {
            w.write_record([k.as_str(), &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Evaluator for LookupEvaluator {
    fn evaluate(&self, g: &Genome) -> Result<f64> {
        let key = g.encode();
        self.table.get(&key).copied().ok_or(Error::MissingGenome(key))
    }

    fn kind(&self) -> EvaluatorKind {
        EvaluatorKind::Lookup
    }
}

/// An exemplar/search pair whose exemplar is planted at `target` (row, col of
/// the 16x16 output grid).
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub pair: InputPair,
    pub target: (usize, usize),
}

/// Settings for synthetic planted-exemplar data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub seed: u64,
    pub count: usize,
    /// Ratio of exemplar to background standard deviation.
    pub snr: f64,
}

/// Half the exemplar feature size: targets closer than this to the border
/// would place part of the exemplar outside the search image.
const TARGET_MARGIN: usize = 3;

fn planted_triple(seed: u64, index: usize, snr: f64) -> Triple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let exemplar = Tensor::from_fn(EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3, |_, _, _| rng.sample::<f32, _>(StandardNormal));
    let bg = (1.0 / snr) as f32;
    let mut search =
        Tensor::from_fn(SEARCH_SIZE, SEARCH_SIZE, 3, |_, _, _| rng.sample::<f32, _>(StandardNormal) * bg);
    let span = TARGET_MARGIN..FEATURE_SIZE - TARGET_MARGIN;
    let target = (rng.random_range(span.clone()), rng.random_range(span));
    let stride = SEARCH_SIZE / FEATURE_SIZE;
    let (oy, ox) = ((target.0 - TARGET_MARGIN) * stride, (target.1 - TARGET_MARGIN) * stride);
    for y in 0..EXEMPLAR_SIZE {
        for x in 0..EXEMPLAR_SIZE {
            for c in 0..3 {
                search.set(oy + y, ox + x, c, exemplar.at(y, x, c));
            }
        }
    }
    Triple { pair: InputPair { exemplar, search }, target }
}

/// Seeded planted-exemplar triples: exemplar pixels are standard normal,
/// background pixels normal with standard deviation `1 / snr`. The exemplar
/// is pasted on the 16-pixel grid so its centre cell is the target.
pub fn synthetic_evalset(cfg: &SyntheticData) -> Vec<Triple> {
    (0..cfg.count).map(|i| planted_triple(cfg.seed, i, cfg.snr)).collect()
}

/// Calibration pairs drawn from the same generator.
pub fn synthetic_calibration(cfg: &SyntheticData) -> Vec<InputPair> {
    synthetic_evalset(cfg).into_iter().map(|t| t.pair).collect()
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.shape();
    let mut buf = Vec::with_capacity(12 + 4 * t.data().len());
    for d in [h, w, c] {
        buf.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend(v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let b = fs::read(path)?;
    if b.len() < 12 {
        return Err(Error::Shape(format!("{} is not a tensor file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let data: Vec<f32> = b[12..].chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().unwrap())).collect();
    Tensor::new(h, w, c, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    exemplar: String,
    search: String,
    row: usize,
    col: usize,
}

/// Writes triples as raw tensors (`u32` h, w, c then little-endian `f32`
/// data) plus an `index.csv` with columns `exemplar,search,row,col`.
pub fn save_evalset(dir: impl AsRef<Path>, triples: &[Triple]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("index.csv"))?;
    for (i, t) in triples.iter().enumerate() {
        let row = IndexRow {
            exemplar: format!("{i:05}_exemplar.bin"),
            search: format!("{i:05}_search.bin"),
            row: t.target.0,
            col: t.target.1,
        };
        write_tensor(&dir.join(&row.exemplar), &t.pair.exemplar)?;
        write_tensor(&dir.join(&row.search), &t.pair.search)?;
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_evalset(dir: impl AsRef<Path>) -> Result<Vec<Triple>> {
    let dir = dir.as_ref();
    let mut rdr = csv::Reader::from_path(dir.join("index.csv"))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<IndexRow>() {
        let row = row?;
        out.push(Triple {
            pair: InputPair {
                exemplar: read_tensor(&dir.join(&row.exemplar))?,
                search: read_tensor(&dir.join(&row.search))?,
            },
            target: (row.row, row.col),
        });
    }
    Ok(out)
}

/// Recalibrates the path's normalization statistics on `calib`, runs every
/// triple, and returns the fraction whose classification peak hits the target.
pub fn proxy_tracking_fitness(
    g: &Genome,
    store: &WeightStore,
    calib: &[InputPair],
    evalset: &[Triple],
    exec: Execution,
) -> Result<f64> {
    if evalset.is_empty() {
        return Err(Error::EmptyEvalset);
    }
    let view = store.path_view(g)?;
    let stats = recalibrate_bn(&view, calib)?;
    let hits = par::map(exec, evalset, |t| {
        forward_tracker(&view, &stats, &t.pair.exemplar, &t.pair.search).map(|o| o.cls.argmax(0) == t.target)
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / evalset.len() as f64)
}

pub struct ProxyEvaluator {
    pub store: Arc<WeightStore>,
    pub calib: Vec<InputPair>,
    pub evalset: Vec<Triple>,
    pub exec: Execution,
}

impl Evaluator for ProxyEvaluator {
    fn evaluate(&self, g: &Genome) -> Result<f64> {
        proxy_tracking_fitness(g, &self.store, &self.calib, &self.evalset, self.exec)
    }

    fn kind(&self) -> EvaluatorKind {
        EvaluatorKind::Proxy
    }
}

/// Backbone/neck normalization scale used by [`template_matching_store`]. Small
/// enough that Swish stays in its near-linear range.
const ORACLE_GAMMA: f32 = 0.05;
const ORACLE_GATE_BIAS: f32 = 20.0;
/// Head normalization shift, in standard deviations, keeping ReLU inputs positive.
const ORACLE_HEAD_SHIFT: f32 = 10.0;

fn set_center(w: &mut [f32], k: usize, cin: usize, cout: usize, pick: impl Fn(usize, usize) -> bool) {
    w.fill(0.0);
    let t = (k / 2) * k + k / 2;
    for ci in 0..cin {
        for co in 0..cout {
            if pick(ci, co) {
                w[(t * cin + ci) * cout + co] = 1.0;
            }
        }
    }
}

fn oracle_params(layer: &str, p: &ParamSet) -> Result<ParamSet> {
    let mut p = p.clone();
    let head = layer.starts_with("cls.") || layer.starts_with("reg.");
    let dims: HashMap<String, Vec<usize>> = p.params().iter().map(|q| (q.name.clone(), q.dims.clone())).collect();
    for (name, d) in &dims {
        let w = p.get_mut(name)?;
        match name.as_str() {
            n if n.ends_with("bn.gamma") => w.fill(if head { 1.0 } else { ORACLE_GAMMA }),
            n if n.ends_with("bn.beta") => w.fill(if head { ORACLE_HEAD_SHIFT } else { 0.0 }),
            "b" | "se.b1" => w.fill(0.0),
            "se.w1" | "se.w2" => w.fill(0.0),
            "se.b2" => w.fill(ORACLE_GATE_BIAS),
            // depthwise: centre tap only
            "dw.w" => set_center(w, d[0], 1, d[2], |_, _| true),
            // final head conv sums every channel at the centre tap
            "w" if d.len() == 4 && head => set_center(w, d[0], d[2], d[3], |_, _| true),
            // stem: output channel c copies input channel c % 3 at the centre tap
            "w" if d.len() == 4 => set_center(w, d[0], d[2], d[3], |ci, co| co % d[2] == ci),
            // 1x1 maps: each output channel copies one input channel
            _ if d.len() == 2 => {
                let (cin, cout) = (d[0], d[1]);
                if cout >= cin {
                    set_center(w, 1, cin, cout, |ci, co| co % cin == ci);
                } else {
                    set_center(w, 1, cin, cout, |ci, co| ci == co);
                }
            }
            _ => {}
        }
    }
    Ok(p)
}

/// A store whose every path computes plain template matching: each backbone
/// feature is a pointwise function of one input pixel on the stride-16 grid,
/// the neck and head layers pass channels through, and the classification map
/// sums the per-channel correlation scores. Planted exemplars therefore peak
/// exactly at their target cell.
pub fn template_matching_store(space: &SpaceDescriptor, seed: u64) -> Result<WeightStore> {
    let base = WeightStore::init(space, seed);
    let keys: Vec<_> = base.keys().cloned().collect();
    let mut store = base.clone();
    for k in keys {
        let p = oracle_params(&k.layer, base.entry(&k.layer, k.choice).expect("key"))?;
        store = store.with_entry(&k.layer, k.choice, p)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::random_genome;

    #[test]
    fn synthetic_is_pure_and_bounded() {
        let e = SyntheticEvaluator::new(5);
        let g = random_genome(1);
        assert_eq!(e.evaluate(&g).unwrap(), e.evaluate(&g).unwrap());
        for s in 0..2000 {
            let v = e.evaluate(&random_genome(s)).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        assert_ne!(SyntheticEvaluator::new(6).score(&g), e.score(&g));
    }

    #[test]
    fn lookup_hits_and_misses() {
        let (a, b) = (random_genome(1), random_genome(2));
        let e = LookupEvaluator::from_pairs([(a.clone(), 0.25)]).unwrap();
        assert_eq!(e.evaluate(&a).unwrap(), 0.25);
        assert!(matches!(e.evaluate(&b), Err(Error::MissingGenome(_))));
        assert!(matches!(
            LookupEvaluator::from_pairs([(a.clone(), 0.1), (a, 0.2)]),
            Err(Error::DuplicateKey(_))
        ));
    }

    #[test]
    fn lookup_csv_roundtrip_and_duplicate_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let e = LookupEvaluator::from_pairs((0..5).map(|s| (random_genome(s), s as f64 / 10.0))).unwrap();
        e.save(&path).unwrap();
        let back = LookupEvaluator::load(&path).unwrap();
        assert_eq!(back, e);

        let enc = random_genome(1).encode();
        let mut w = csv::Writer::from_path(&path).unwrap();
        w.write_record(["genome", "score"]).unwrap();
        w.write_record([enc.as_str(), "0.5"]).unwrap();
        w.write_record([enc.as_str(), "0.7"]).unwrap();
        w.flush().unwrap();
        assert!(matches!(LookupEvaluator::load(&path), Err(Error::DuplicateKey(_))));
    }

    #[test]
    fn planted_data_is_deterministic_and_aligned() {
        let cfg = SyntheticData { seed: 3, count: 4, snr: 2.0 };
        let a = synthetic_evalset(&cfg);
        assert_eq!(a, synthetic_evalset(&cfg));
        for t in &a {
            let (r, c) = t.target;
            assert!((3..13).contains(&r) && (3..13).contains(&c));
            let (oy, ox) = ((r - 3) * 16, (c - 3) * 16);
            assert_eq!(t.pair.search.at(oy + 5, ox + 9, 1), t.pair.exemplar.at(5, 9, 1));
        }
    }

    #[test]
    fn evalset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_evalset(&SyntheticData { seed: 1, count: 2, snr: 3.0 });
        save_evalset(dir.path(), &set).unwrap();
        assert_eq!(load_evalset(dir.path()).unwrap(), set);
    }

    #[test]
    fn empty_evalset_is_rejected() {
        let store = WeightStore::init(&SpaceDescriptor::singleton(&random_genome(0)).unwrap(), 0);
        let err = proxy_tracking_fitness(&random_genome(0), &store, &[], &[], Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::EmptyEvalset));
    }
}
