//! Minimal deterministic CPU forward pass for every operator of the space.
//!
//! Tensors are dense `f32` in height-width-channel order: element `(y, x, c)`
//! lives at `(y * w + x) * c_total + c`. Convolutions use "same" zero padding of
//! `k / 2` and produce `ceil(h / stride)` outputs per axis. Padded taps are
//! counted as MACs, which keeps the instrumented count equal to the analytic
//! `H_out * W_out * K^2 * C_in / groups * C_out` convention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{se_channels, OpFamily, OperatorSpec};
use crate::error::{Error, Result};
use crate::space::{
    block_geometry, Branch, Genome, EXEMPLAR_SIZE, FEATURE_SIZE, HEAD_INPUT_CHANNELS, SEARCH_SIZE,
    STEM_CHANNELS,
};
use crate::supernet::{ParamSet, PathView};

/// Normalization epsilon.
pub const BN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "data length {} does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at index {i}")));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Position of the largest value of channel `ch`; ties go to the first in
    /// row-major order.
    pub fn argmax(&self, ch: usize) -> (usize, usize) {
        let mut best = (0, 0);
        let mut bv = f32::NEG_INFINITY;
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.at(y, x, ch);
                if v > bv {
                    bv = v;
                    best = (y, x);
                }
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Grouped 2-D convolution with same padding and no bias.
///
/// `weights` are laid out `[k][k][in_channels / groups][out_channels]`; for a
/// depthwise conv (`groups == in == out`) that is `[k][k][channels]`.
pub fn conv2d(
    x: &Tensor,
    weights: &[f32],
    kernel: usize,
    stride: usize,
    groups: usize,
    out_channels: usize,
) -> Result<Tensor> {
    let mut macs = 0;
    conv2d_counted(x, weights, kernel, stride, groups, out_channels, &mut macs)
}

pub fn conv2d_counted(
    x: &Tensor,
    weights: &[f32],
    kernel: usize,
    stride: usize,
    groups: usize,
    out_channels: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    let cin = x.c;
    if kernel.is_multiple_of(2) || stride == 0 || groups == 0 {
        return Err(Error::Shape(format!("bad conv geometry k={kernel} s={stride} g={groups}")));
    }
    if !cin.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
        return Err(Error::Shape(format!(
            "channels {cin}->{out_channels} not divisible by {groups} groups"
        )));
    }
    let expected = kernel * kernel * (cin / groups) * out_channels;
    if weights.len() != expected {
        return Err(Error::Shape(format!("conv weights have {} values, expected {expected}", weights.len())));
    }
    Ok(if kernel == 1 && groups == 1 {
        pointwise(x, weights, stride, out_channels, macs)
    } else if groups == cin && out_channels == cin {
        depthwise(x, weights, kernel, stride, macs)
    } else {
        dense(x, weights, kernel, stride, groups, out_channels, macs)
    })
}

fn pointwise(x: &Tensor, w: &[f32], stride: usize, cout: usize, macs: &mut u64) -> Tensor {
    let (ho, wo) = (x.h.div_ceil(stride), x.w.div_ceil(stride));
    let mut out = Tensor::zeros(ho, wo, cout);
    for (p, o) in out.data.chunks_exact_mut(cout).enumerate() {
        let inp = x.pixel((p / wo) * stride, (p % wo) * stride);
        for (&a, row) in inp.iter().zip(w.chunks_exact(cout)) {
            for (o, &wv) in o.iter_mut().zip(row) {
                *o += a * wv;
            }
            *macs += cout as u64;
        }
    }
    out
}

fn tap(o: usize, stride: usize, k: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

fn depthwise(x: &Tensor, w: &[f32], k: usize, stride: usize, macs: &mut u64) -> Tensor {
    let c = x.c;
    let pad = k / 2;
    let (ho, wo) = (x.h.div_ceil(stride), x.w.div_ceil(stride));
    let mut out = Tensor::zeros(ho, wo, c);
    for (p, o) in out.data.chunks_exact_mut(c).enumerate() {
        let (oy, ox) = (p / wo, p % wo);
        for ky in 0..k {
            let iy = tap(oy, stride, ky, pad, x.h);
            for kx in 0..k {
                *macs += c as u64;
                let (Some(iy), Some(ix)) = (iy, tap(ox, stride, kx, pad, x.w)) else {
                    continue;
                };
                let inp = x.pixel(iy, ix);
                let wr = &w[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                for ((o, &a), &wv) in o.iter_mut().zip(inp).zip(wr) {
                    *o += a * wv;
                }
            }
        }
    }
    out
}

fn dense(x: &Tensor, w: &[f32], k: usize, stride: usize, groups: usize, cout: usize, macs: &mut u64) -> Tensor {
    let pad = k / 2;
    let cin_g = x.c / groups;
    let cout_g = cout / groups;
    let (ho, wo) = (x.h.div_ceil(stride), x.w.div_ceil(stride));
    let mut out = Tensor::zeros(ho, wo, cout);
    for (p, o) in out.data.chunks_exact_mut(cout).enumerate() {
        let (oy, ox) = (p / wo, p % wo);
        for ky in 0..k {
            let iy = tap(oy, stride, ky, pad, x.h);
            for kx in 0..k {
                let (Some(iy), Some(ix)) = (iy, tap(ox, stride, kx, pad, x.w)) else {
                    *macs += (cin_g * cout) as u64;
                    continue;
                };
                let inp = x.pixel(iy, ix);
                let t = ky * k + kx;
                for g in 0..groups {
                    let og = &mut o[g * cout_g..(g + 1) * cout_g];
                    for ci in 0..cin_g {
                        let a = inp[g * cin_g + ci];
                        let row = &w[(t * cin_g + ci) * cout + g * cout_g..][..cout_g];
                        for (o, &wv) in og.iter_mut().zip(row) {
                            *o += a * wv;
                        }
                        *macs += cout_g as u64;
                    }
                }
            }
        }
    }
    out
}

/// Depthwise cross-correlation of an exemplar feature over a search feature,
/// zero padded by half the exemplar size so the search resolution is kept.
pub fn xcorr_depthwise(exemplar: &Tensor, search: &Tensor) -> Result<Tensor> {
    let mut macs = 0;
    xcorr_depthwise_counted(exemplar, search, &mut macs)
}

pub fn xcorr_depthwise_counted(exemplar: &Tensor, search: &Tensor, macs: &mut u64) -> Result<Tensor> {
    if exemplar.c != search.c {
        return Err(Error::Shape(format!("channel mismatch {} vs {}", exemplar.c, search.c)));
    }
    if exemplar.h.is_multiple_of(2) || exemplar.w.is_multiple_of(2) {
        return Err(Error::Shape("exemplar feature size must be odd".into()));
    }
    let c = search.c;
    let (py, px) = (exemplar.h / 2, exemplar.w / 2);
    let mut out = Tensor::zeros(search.h, search.w, c);
    for (p, o) in out.data.chunks_exact_mut(c).enumerate() {
        let (oy, ox) = (p / search.w, p % search.w);
        for dy in 0..exemplar.h {
            let iy = tap(oy, 1, dy, py, search.h);
            for dx in 0..exemplar.w {
                *macs += c as u64;
                let (Some(iy), Some(ix)) = (iy, tap(ox, 1, dx, px, search.w)) else {
                    continue;
                };
                for ((o, &s), &z) in o.iter_mut().zip(search.pixel(iy, ix)).zip(exemplar.pixel(dy, dx)) {
                    *o += s * z;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Swish,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Activation {
    fn apply(self, t: &mut Tensor) {
        match self {
            Activation::Identity => {}
            Activation::Relu => t.data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Swish => t.data.iter_mut().for_each(|v| *v *= sigmoid(*v)),
        }
    }
}

/// Per-channel moments of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    pub fn unit(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Population moments over every pixel of every tensor, per channel.
    pub fn of(xs: &[Tensor]) -> Self {
        let c = xs.first().map_or(0, |t| t.c);
        let mut sum = vec![0f64; c];
        let mut n = 0usize;
        for t in xs {
            for px in t.data.chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
            n += t.h * t.w;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        let mut sq = vec![0f64; c];
        for t in xs {
            for px in t.data.chunks_exact(c) {
                for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    let d = v as f64 - m;
                    *s += d * d;
                }
            }
        }
        let var = sq.iter().map(|s| s / n.max(1) as f64).collect();
        Self { mean, var }
    }
}

/// Normalization statistics of one sampled path, keyed by layer name
/// (`stem.bn`, `block3.dw.bn`, `cls.layer2.pw.bn`, ...).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    layers: BTreeMap<String, NormStats>,
    #[serde(default)]
    unit_fallback: bool,
}

impl PathStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero mean / unit variance for every layer. Normalization then reduces
    /// to the affine transform alone.
    pub fn unit() -> Self {
        Self { layers: BTreeMap::new(), unit_fallback: true }
    }

    pub fn insert(&mut self, name: impl Into<String>, s: NormStats) {
        self.layers.insert(name.into(), s);
    }

    pub fn get(&self, name: &str) -> Option<&NormStats> {
        self.layers.get(name)
    }

    pub fn layers(&self) -> &BTreeMap<String, NormStats> {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn resolve(&self, name: &str, channels: usize) -> Result<NormStats> {
        match self.layers.get(name) {
            Some(s) if s.mean.len() == channels => Ok(s.clone()),
            Some(s) => Err(Error::Shape(format!(
                "stats for {name} have {} channels, expected {channels}",
                s.mean.len()
            ))),
            None if self.unit_fallback => Ok(NormStats::unit(channels)),
            None => Err(Error::MissingStats(name.to_string())),
        }
    }
}

/// Parameter tensors making up one operator: (name, dims, init rule).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with standard deviation `1 / sqrt(fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
}

pub fn param_layout(spec: &OperatorSpec) -> Vec<(String, Vec<usize>, Init)> {
    let (k, cin, cout) = (spec.kernel, spec.in_channels, spec.out_channels);
    let mut out = Vec::new();
    let bn = |out: &mut Vec<_>, p: &str, c: usize| {
        out.push((format!("{p}bn.gamma"), vec![c], Init::Ones));
        out.push((format!("{p}bn.beta"), vec![c], Init::Zeros));
    };
    match spec.family {
        OpFamily::Skip | OpFamily::Xcorr => {}
        OpFamily::Conv => {
            out.push(("w".into(), vec![k, k, cin, cout], Init::FanIn(k * k * cin)));
            bn(&mut out, "", cout);
        }
        OpFamily::Neck1x1 => {
            out.push(("w".into(), vec![cin, cout], Init::FanIn(cin)));
            bn(&mut out, "", cout);
        }
        OpFamily::HeadFinal => {
            out.push(("w".into(), vec![k, k, cin, cout], Init::FanIn(k * k * cin)));
            out.push(("b".into(), vec![cout], Init::Zeros));
        }
        OpFamily::Dsconv => {
            out.push(("dw.w".into(), vec![k, k, cin], Init::FanIn(k * k)));
            bn(&mut out, "dw.", cin);
            out.push(("pw.w".into(), vec![cin, cout], Init::FanIn(cin)));
            bn(&mut out, "pw.", cout);
        }
        OpFamily::MbconvSe => {
            let ce = spec.expanded_channels();
            let cr = se_channels(ce);
            out.push(("expand.w".into(), vec![cin, ce], Init::FanIn(cin)));
            bn(&mut out, "expand.", ce);
            out.push(("dw.w".into(), vec![k, k, ce], Init::FanIn(k * k)));
            bn(&mut out, "dw.", ce);
            out.push(("se.w1".into(), vec![ce, cr], Init::FanIn(ce)));
            out.push(("se.b1".into(), vec![cr], Init::Zeros));
            out.push(("se.w2".into(), vec![cr, ce], Init::FanIn(cr)));
            out.push(("se.b2".into(), vec![ce], Init::Zeros));
            out.push(("project.w".into(), vec![ce, cout], Init::FanIn(ce)));
            bn(&mut out, "project.", cout);
        }
    }
    out
}

enum NormSource<'s> {
    Apply(&'s PathStats),
    Calibrate(PathStats),
}

/// Executes operators over a batch of tensors, sharing normalization state and
/// a MAC counter across the batch.
struct Runner<'s> {
    norm: NormSource<'s>,
    macs: u64,
    observed: Option<BTreeMap<String, NormStats>>,
}

impl<'s> Runner<'s> {
    fn apply(stats: &'s PathStats) -> Self {
        Self { norm: NormSource::Apply(stats), macs: 0, observed: None }
    }

    fn calibrate() -> Self {
        Self { norm: NormSource::Calibrate(PathStats::new()), macs: 0, observed: None }
    }

    fn conv(&mut self, xs: &[Tensor], w: &[f32], k: usize, s: usize, groups: usize, cout: usize) -> Result<Vec<Tensor>> {
        xs.iter()
            .map(|x| conv2d_counted(x, w, k, s, groups, cout, &mut self.macs))
            .collect()
    }

    fn norm(&mut self, name: &str, xs: &mut [Tensor], p: &ParamSet, prefix: &str, act: Activation) -> Result<()> {
        let gamma = p.get(&format!("{prefix}bn.gamma"))?;
        let beta = p.get(&format!("{prefix}bn.beta"))?;
        let c = gamma.len();
        if let Some(t) = xs.iter().find(|t| t.c != c) {
            return Err(Error::Shape(format!("{name}: {} channels, normalization has {c}", t.c)));
        }
        let stats = match &mut self.norm {
            NormSource::Apply(ps) => ps.resolve(name, c)?,
            NormSource::Calibrate(ps) => {
                let s = NormStats::of(xs);
                ps.insert(name, s.clone());
                s
            }
        };
        let inv: Vec<f32> = stats.var.iter().map(|v| (1.0 / (v + BN_EPS).sqrt()) as f32).collect();
        let mean: Vec<f32> = stats.mean.iter().map(|&m| m as f32).collect();
        for t in xs.iter_mut() {
            for px in t.data.chunks_exact_mut(c) {
                for ((v, m), i) in px.iter_mut().zip(&mean).zip(&inv) {
                    *v = (*v - m) * i;
                }
            }
        }
        if let Some(obs) = &mut self.observed {
            obs.insert(name.to_string(), NormStats::of(xs));
        }
        for t in xs.iter_mut() {
            for px in t.data.chunks_exact_mut(c) {
                for ((v, g), b) in px.iter_mut().zip(gamma).zip(beta) {
                    *v = *v * g + b;
                }
            }
            act.apply(t);
        }
        Ok(())
    }

    fn conv_bn(
        &mut self,
        name: &str,
        xs: &[Tensor],
        p: &ParamSet,
        prefix: &str,
        (k, s, groups, cout): (usize, usize, usize, usize),
        act: Activation,
    ) -> Result<Vec<Tensor>> {
        let w = p.get(&format!("{prefix}w"))?;
        let mut ys = self.conv(xs, w, k, s, groups, cout)?;
        self.norm(&format!("{name}.{prefix}bn"), &mut ys, p, prefix, act)?;
        Ok(ys)
    }

    fn stem(&mut self, xs: &[Tensor], p: &ParamSet) -> Result<Vec<Tensor>> {
        let w = p.get("w")?;
        let mut ys = self.conv(xs, w, 3, 2, 1, STEM_CHANNELS)?;
        self.norm("stem.bn", &mut ys, p, "", Activation::Swish)?;
        Ok(ys)
    }

    fn dsconv(&mut self, name: &str, xs: &[Tensor], p: &ParamSet, spec: &OperatorSpec, act: Activation) -> Result<Vec<Tensor>> {
        let cin = spec.in_channels;
        if let Some(t) = xs.iter().find(|t| t.c != cin) {
            return Err(Error::Shape(format!("{name}: input has {} channels, expected {cin}", t.c)));
        }
        let h = self.conv_bn(name, xs, p, "dw.", (spec.kernel, spec.stride, cin, cin), act)?;
        self.conv_bn(name, &h, p, "pw.", (1, 1, 1, spec.out_channels), act)
    }

    fn se(&mut self, xs: &mut [Tensor], p: &ParamSet) -> Result<()> {
        let (w1, b1, w2, b2) = (p.get("se.w1")?, p.get("se.b1")?, p.get("se.w2")?, p.get("se.b2")?);
        for t in xs.iter_mut() {
            se_gate(t, w1, b1, w2, b2, &mut self.macs)?;
        }
        Ok(())
    }

    fn mbconv(&mut self, name: &str, xs: Vec<Tensor>, p: &ParamSet, spec: &OperatorSpec) -> Result<Vec<Tensor>> {
        let (cin, ce) = (spec.in_channels, spec.expanded_channels());
        if let Some(t) = xs.iter().find(|t| t.c != cin) {
            return Err(Error::Shape(format!("{name}: input has {} channels, expected {cin}", t.c)));
        }
        let h = self.conv_bn(name, &xs, p, "expand.", (1, 1, 1, ce), Activation::Swish)?;
        let mut h = self.conv_bn(name, &h, p, "dw.", (spec.kernel, spec.stride, ce, ce), Activation::Swish)?;
        self.se(&mut h, p)?;
        let mut ys = self.conv_bn(name, &h, p, "project.", (1, 1, 1, spec.out_channels), Activation::Identity)?;
        if spec.stride == 1 && cin == spec.out_channels {
            for (y, x) in ys.iter_mut().zip(&xs) {
                for (a, b) in y.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
            }
        }
        Ok(ys)
    }

    /// Backbone (stem through the chosen output block) plus neck.
    fn backbone(&mut self, view: &PathView, g: &Genome, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut h = self.stem(xs, view.layer("stem")?)?;
        h = self.dsconv(
            "dsconv",
            &h,
            view.layer("dsconv")?,
            &OperatorSpec::dsconv(3, 1, STEM_CHANNELS, STEM_CHANNELS),
            Activation::Swish,
        )?;
        for i in 0..=g.output_block() {
            let geo = block_geometry(i);
            let c = g.backbone_choice(i);
            let spec = OperatorSpec::mbconv(c.kernel, c.expansion, geo.stride, geo.in_channels, geo.out_channels);
            let name = format!("block{i}");
            h = self.mbconv(&name, h, view.layer(&name)?, &spec)?;
        }
        self.conv_bn("neck", &h, view.layer("neck")?, "", (1, 1, 1, HEAD_INPUT_CHANNELS), Activation::Swish)
    }

    fn head(&mut self, view: &PathView, g: &Genome, b: Branch, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let br = g.branch(b);
        let c = br.channel_count();
        let first = format!("{}.first", b.name());
        let mut h = self.dsconv(
            &first,
            xs,
            view.layer(&first)?,
            &OperatorSpec::dsconv(br.first_kernel_size(), 1, HEAD_INPUT_CHANNELS, c),
            Activation::Relu,
        )?;
        for (j, l) in br.layers.iter().enumerate() {
            if let Some(k) = l.kernel() {
                let name = format!("{}.layer{j}", b.name());
                h = self.dsconv(&name, &h, view.layer(&name)?, &OperatorSpec::dsconv(k, 1, c, c), Activation::Relu)?;
            }
        }
        let fin = view.layer(&format!("{}.final", b.name()))?;
        let (w, bias) = (fin.get("w")?, fin.get("b")?);
        let mut ys = self.conv(&h, w, 3, 1, 1, b.outputs())?;
        for y in ys.iter_mut() {
            for px in y.data.chunks_exact_mut(b.outputs()) {
                for (v, bv) in px.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        Ok(ys)
    }

    fn tracker(&mut self, view: &PathView, pairs: &[InputPair]) -> Result<Vec<TrackerOutput>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for p in pairs {
            check_input(&p.exemplar, EXEMPLAR_SIZE, "exemplar")?;
            check_input(&p.search, SEARCH_SIZE, "search")?;
        }
        let g = view.genome().clone();
        let n = pairs.len();
        let mut batch: Vec<Tensor> = pairs.iter().map(|p| p.search.clone()).collect();
        batch.extend(pairs.iter().map(|p| p.exemplar.clone()));
        let feats = self.backbone(view, &g, &batch)?;
        let (search, exemplar) = feats.split_at(n);
        let corr = search
            .iter()
            .zip(exemplar)
            .map(|(s, z)| xcorr_depthwise_counted(z, s, &mut self.macs))
            .collect::<Result<Vec<_>>>()?;
        let cls = self.head(view, &g, Branch::Cls, &corr)?;
        let reg = self.head(view, &g, Branch::Reg, &corr)?;
        Ok(cls.into_iter().zip(reg).map(|(cls, reg)| TrackerOutput { cls, reg }).collect())
    }
}

fn check_input(t: &Tensor, size: usize, what: &str) -> Result<()> {
    if t.shape() != (size, size, 3) {
        return Err(Error::Shape(format!("{what} image must be {size}x{size}x3, got {:?}", t.shape())));
    }
    Ok(())
}

/// Squeeze-excitation: global average pool, two fully-connected maps with a
/// Swish in between, sigmoid gate, channel rescale. Modifies `t` in place.
pub fn se_gate(t: &mut Tensor, w1: &[f32], b1: &[f32], w2: &[f32], b2: &[f32], macs: &mut u64) -> Result<()> {
    let ce = t.c;
    let cr = b1.len();
    if w1.len() != ce * cr || w2.len() != cr * ce || b2.len() != ce {
        return Err(Error::Shape(format!("squeeze-excitation weights do not fit {ce} channels")));
    }
    let mut pooled = vec![0f64; ce];
    for px in t.data.chunks_exact(ce) {
        for (s, &v) in pooled.iter_mut().zip(px) {
            *s += v as f64;
        }
    }
    let n = (t.h * t.w) as f64;
    let pooled: Vec<f32> = pooled.iter().map(|s| (s / n) as f32).collect();
    let mut hidden = b1.to_vec();
    for (&a, row) in pooled.iter().zip(w1.chunks_exact(cr)) {
        for (h, &wv) in hidden.iter_mut().zip(row) {
            *h += a * wv;
        }
        *macs += cr as u64;
    }
    hidden.iter_mut().for_each(|v| *v *= sigmoid(*v));
    let mut gate = b2.to_vec();
    for (&a, row) in hidden.iter().zip(w2.chunks_exact(ce)) {
        for (g, &wv) in gate.iter_mut().zip(row) {
            *g += a * wv;
        }
        *macs += ce as u64;
    }
    gate.iter_mut().for_each(|v| *v = sigmoid(*v));
    for px in t.data.chunks_exact_mut(ce) {
        for (v, g) in px.iter_mut().zip(&gate) {
            *v *= g;
        }
        *macs += ce as u64;
    }
    Ok(())
}

/// One exemplar / search image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPair {
    pub exemplar: Tensor,
    pub search: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerOutput {
    /// 16x16x1 classification map.
    pub cls: Tensor,
    /// 16x16x4 box regression map.
    pub reg: Tensor,
}

/// Applies one depthwise-separable conv using `stats` for its two
/// normalization layers (named `{name}.dw.bn` and `{name}.pw.bn`).
pub fn dsconv_forward(
    x: &Tensor,
    p: &ParamSet,
    spec: &OperatorSpec,
    stats: &PathStats,
    name: &str,
    act: Activation,
) -> Result<Tensor> {
    let mut r = Runner::apply(stats);
    Ok(r.dsconv(name, std::slice::from_ref(x), p, spec, act)?.remove(0))
}

/// Applies one MBConv block (expand, depthwise, squeeze-excitation, project,
/// optional residual).
pub fn mbconv_forward(x: &Tensor, p: &ParamSet, spec: &OperatorSpec, stats: &PathStats, name: &str) -> Result<Tensor> {
    if spec.family != OpFamily::MbconvSe {
        return Err(Error::InvalidOperator(format!("{:?} is not an MBConv", spec.family)));
    }
    let mut r = Runner::apply(stats);
    Ok(r.mbconv(name, vec![x.clone()], p, spec)?.remove(0))
}

/// Runs the full tracker for one image pair.
pub fn forward_tracker(view: &PathView, stats: &PathStats, exemplar: &Tensor, search: &Tensor) -> Result<TrackerOutput> {
    Ok(forward_tracker_counted(view, stats, exemplar, search)?.0)
}

/// Like [`forward_tracker`], also returning the number of MACs executed.
pub fn forward_tracker_counted(
    view: &PathView,
    stats: &PathStats,
    exemplar: &Tensor,
    search: &Tensor,
) -> Result<(TrackerOutput, u64)> {
    let mut r = Runner::apply(stats);
    let pair = InputPair { exemplar: exemplar.clone(), search: search.clone() };
    let out = r.tracker(view, std::slice::from_ref(&pair))?.remove(0);
    Ok((out, r.macs))
}

/// Recomputes every normalization layer's statistics for the path of `view`.
///
/// The whole stream is pushed through the network as one batch, layer by
/// layer; each layer is normalized with its freshly computed moments before the
/// next layer's moments are taken. Exemplar and search activations that share
/// a layer are pooled.
pub fn recalibrate_bn(view: &PathView, calib: &[InputPair]) -> Result<PathStats> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut r = Runner::calibrate();
    r.tracker(view, calib)?;
    match r.norm {
        NormSource::Calibrate(s) => Ok(s),
        NormSource::Apply(_) => unreachable!(),
    }
}

/// Runs `pairs` as one batch under fixed `stats` and returns, per layer, the
/// moments of the normalized activations (before the affine transform).
pub fn normalized_moments(
    view: &PathView,
    stats: &PathStats,
    pairs: &[InputPair],
) -> Result<BTreeMap<String, NormStats>> {
    let mut r = Runner::apply(stats);
    r.observed = Some(BTreeMap::new());
    r.tracker(view, pairs)?;
    Ok(r.observed.unwrap_or_default())
}

/// MACs executed by a forward pass of the path of `view`, counted in the
/// innermost loops of the engine.
pub fn instrumented_macs(view: &PathView) -> Result<u64> {
    let z = Tensor::zeros(EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3);
    let x = Tensor::zeros(SEARCH_SIZE, SEARCH_SIZE, 3);
    let (out, macs) = forward_tracker_counted(view, &PathStats::unit(), &z, &x)?;
    debug_assert_eq!(out.cls.shape(), (FEATURE_SIZE, FEATURE_SIZE, 1));
    Ok(macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{Param, ParamSet};

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(h, w, c, |y, x, ch| ((y * 7 + x * 3 + ch * 11) % 13) as f32 / 13.0 - 0.4)
    }

    #[test]
    fn tensor_rejects_bad_data() {
        assert!(Tensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Tensor::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Tensor::new(1, 2, 1, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = ramp(5, 4, 3);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let y = conv2d(&x, &w, 1, 1, 1, 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::zeros(8, 8, 4);
        let w: Vec<f32> = (0..3 * 3 * 4 * 6).map(|i| i as f32 * 0.1).collect();
        let y = conv2d(&x, &w, 3, 2, 1, 6).unwrap();
        assert_eq!(y.shape(), (4, 4, 6));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_box_sum_on_delta() {
        let mut x = Tensor::zeros(5, 5, 1);
        x.set(2, 1, 0, 1.0);
        let y = conv2d(&x, &[1.0; 9], 3, 1, 1, 1).unwrap();
        for yy in 0..5 {
            for xx in 0..5 {
                let expect = if (1..=3).contains(&yy) && xx <= 2 { 1.0 } else { 0.0 };
                assert_eq!(y.at(yy, xx, 0), expect, "({yy},{xx})");
            }
        }
    }

    #[test]
    fn conv_paths_agree_with_naive_reference() {
        // dense, grouped and depthwise kernels against a direct six-loop reference
        for &(k, s, g, cin, cout) in &[(3, 1, 1, 3, 5), (5, 2, 1, 2, 3), (3, 2, 2, 4, 6), (5, 2, 4, 4, 4), (1, 2, 1, 3, 2)] {
            let x = ramp(7, 6, cin);
            let w: Vec<f32> = (0..k * k * cin / g * cout).map(|i| ((i * 37 % 17) as f32 - 8.0) / 9.0).collect();
            let mut macs = 0;
            let y = conv2d_counted(&x, &w, k, s, g, cout, &mut macs).unwrap();
            let (ho, wo) = (7usize.div_ceil(s), 6usize.div_ceil(s));
            assert_eq!(y.shape(), (ho, wo, cout));
            assert_eq!(macs as usize, ho * wo * k * k * (cin / g) * cout);
            let (cin_g, cout_g) = (cin / g, cout / g);
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let grp = co / cout_g;
                        let mut acc = 0.0f32;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - (k / 2) as isize;
                                let ix = (ox * s + kx) as isize - (k / 2) as isize;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                for ci in 0..cin_g {
                                    acc += x.at(iy as usize, ix as usize, grp * cin_g + ci)
                                        * w[((ky * k + kx) * cin_g + ci) * cout + co];
                                }
                            }
                        }
                        assert!((acc - y.at(oy, ox, co)).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = ramp(4, 4, 3);
        assert!(conv2d(&x, &[0.0; 10], 3, 1, 1, 1).is_err());
        assert!(conv2d(&x, &[0.0; 16], 4, 1, 1, 1).is_err());
        assert!(conv2d(&x, &[0.0; 9], 3, 1, 2, 2).is_err());
    }

    fn planted(ex: &Tensor, cy: usize, cx: usize) -> Tensor {
        let mut s = Tensor::zeros(16, 16, ex.c);
        for dy in 0..7 {
            for dx in 0..7 {
                let (y, x) = (cy as isize + dy as isize - 3, cx as isize + dx as isize - 3);
                if (0..16).contains(&y) && (0..16).contains(&x) {
                    for c in 0..ex.c {
                        s.set(y as usize, x as usize, c, ex.at(dy, dx, c));
                    }
                }
            }
        }
        s
    }

    #[test]
    fn xcorr_zero_exemplar_and_bilinearity() {
        let s = ramp(16, 16, 4);
        let z = Tensor::zeros(7, 7, 4);
        assert!(xcorr_depthwise(&z, &s).unwrap().data().iter().all(|&v| v == 0.0));
        let z = ramp(7, 7, 4);
        let mut z2 = z.clone();
        z2.scale(2.0);
        let a = xcorr_depthwise(&z, &s).unwrap();
        let b = xcorr_depthwise(&z2, &s).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn xcorr_peak_at_planted_copy() {
        let z = Tensor::from_fn(7, 7, 8, |y, x, c| 0.5 + ((y * 5 + x * 3 + c) % 7) as f32 / 7.0);
        for &(cy, cx) in &[(3, 3), (8, 11), (12, 4), (0, 15)] {
            let s = planted(&z, cy, cx);
            let out = xcorr_depthwise(&z, &s).unwrap();
            assert_eq!(out.shape(), (16, 16, 8));
            for c in 0..8 {
                assert_eq!(out.argmax(c), (cy, cx), "channel {c}");
            }
        }
    }

    #[test]
    fn xcorr_channel_mismatch() {
        assert!(xcorr_depthwise(&Tensor::zeros(7, 7, 3), &Tensor::zeros(16, 16, 4)).is_err());
        assert!(xcorr_depthwise(&Tensor::zeros(6, 6, 4), &Tensor::zeros(16, 16, 4)).is_err());
    }

    fn params_for(spec: &OperatorSpec, fill: impl Fn(&str, usize) -> f32) -> ParamSet {
        ParamSet::new(
            param_layout(spec)
                .into_iter()
                .map(|(name, dims, init)| {
                    let n: usize = dims.iter().product();
                    let data = (0..n)
                        .map(|i| match init {
                            Init::Ones => 1.0,
                            Init::Zeros => 0.0,
                            Init::FanIn(_) => fill(&name, i),
                        })
                        .collect();
                    Param { name, dims, data }
                })
                .collect(),
        )
    }

    #[test]
    fn mbconv_zero_projection_is_residual_passthrough() {
        let spec = OperatorSpec::mbconv(5, 4, 1, 8, 8);
        let p = params_for(&spec, |name, i| if name == "project.w" { 0.0 } else { (i % 5) as f32 * 0.1 - 0.2 });
        let x = ramp(6, 6, 8);
        let y = mbconv_forward(&x, &p, &spec, &PathStats::unit(), "b").unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn saturated_se_gate_is_identity() {
        let mut t = ramp(4, 4, 8);
        let before = t.clone();
        let mut macs = 0;
        se_gate(&mut t, &[0.3; 16], &[0.0; 2], &[-0.2; 16], &[100.0; 8], &mut macs).unwrap();
        assert_eq!(t, before);
        assert_eq!(macs, 16 + 16 + 4 * 4 * 8);
    }

    #[test]
    fn mbconv_stage_entry_shape() {
        let geo = block_geometry(0);
        let spec = OperatorSpec::mbconv(3, 6, geo.stride, geo.in_channels, geo.out_channels);
        let p = params_for(&spec, |_, i| ((i % 7) as f32 - 3.0) * 0.05);
        let x = ramp(128, 128, 16);
        let y = mbconv_forward(&x, &p, &spec, &PathStats::unit(), "block0").unwrap();
        assert_eq!(y.shape(), (64, 64, 24));
        assert!(y.all_finite());
    }

    #[test]
    fn missing_stats_is_an_error() {
        let spec = OperatorSpec::dsconv(3, 1, 4, 4);
        let p = params_for(&spec, |_, _| 0.1);
        let err = dsconv_forward(&ramp(4, 4, 4), &p, &spec, &PathStats::new(), "d", Activation::Relu).unwrap_err();
        assert!(matches!(err, Error::MissingStats(ref n) if n == "d.dw.bn"));
    }

    #[test]
    fn dsconv_channel_mismatch() {
        let spec = OperatorSpec::dsconv(3, 1, 4, 4);
        let p = params_for(&spec, |_, _| 0.1);
        assert!(dsconv_forward(&ramp(4, 4, 3), &p, &spec, &PathStats::unit(), "d", Activation::Relu).is_err());
    }

    #[test]
    fn norm_stats_population_moments() {
        let a = Tensor::new(1, 2, 1, vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(1, 1, 1, vec![5.0]).unwrap();
        let s = NormStats::of(&[a, b]);
        assert!((s.mean[0] - 3.0).abs() < 1e-12);
        assert!((s.var[0] - 8.0 / 3.0).abs() < 1e-12);
    }
}
