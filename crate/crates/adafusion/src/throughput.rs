//! Bag-level inference throughput.
//!
//! The training code evaluates one tile at a time in f64, which is far too
//! slow for bags of tens of thousands of tiles. [`InferenceEngine`] re-runs
//! the same forward pass in f32 over chunks of tiles with blocked matrix
//! products, and pools the attention head with a running softmax so memory
//! stays bounded by the chunk size.

use std::time::{Duration, Instant};

use adafusion_core::activation::LAYER_NORM_EPS;
use adafusion_core::baselines::SelfAttnParams;
use adafusion_core::heads::AbmilParams;
use adafusion_core::model::{Fusion, FusionModel, Head, ModelSpec, Variant};
use adafusion_core::rng::{self, purpose};
use adafusion_core::tuner::{GateVariant, TunerParams};
use adafusion_core::TaskKind;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADS: usize = adafusion_core::baselines::self_attn::HEADS;
const FRAC_1_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// `out = a * w` with `a` of shape `rows x inner` and `w` of `inner x cols`,
/// all row-major. Single-threaded.
fn matmul(a: &[f32], rows: usize, inner: usize, w: &[f32], cols: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    // SAFETY: the slices have exactly the extents described by the strides.
    unsafe {
        gemm::gemm(
            rows,
            cols,
            inner,
            out.as_mut_ptr(),
            1,
            cols as isize,
            false,
            a.as_ptr(),
            1,
            inner as isize,
            w.as_ptr(),
            1,
            cols as isize,
            0.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * FRAC_1_SQRT_2))
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer norm of `src` into `dst`.
fn layer_norm_rows(src: &[f32], dst: &mut [f32], gamma: &[f32], beta: &[f32]) {
    let width = gamma.len();
    for (x, y) in src.chunks_exact(width).zip(dst.chunks_exact_mut(width)) {
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for k in 0..width {
            y[k] = gamma[k] * ((x[k] as f64 - mean) * inv) as f32 + beta[k];
        }
    }
}

fn f32s(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

struct FineEngine {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    hidden: usize,
    variant: GateVariant,
    dim: usize,
}

impl FineEngine {
    fn new(t: &TunerParams) -> Self {
        Self {
            gamma: f32s(&t.norm_scale),
            beta: f32s(&t.norm_shift),
            w1: f32s(&t.w1.data),
            b1: f32s(&t.b1),
            w2: f32s(&t.w2.data),
            b2: f32s(&t.b2),
            hidden: t.hidden,
            variant: t.variant,
            dim: t.dim,
        }
    }

    fn fuse(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let width = self.gamma.len();
        let out_len = self.b2.len();
        let mut normed = vec![0.0; x.len()];
        layer_norm_rows(x, &mut normed, &self.gamma, &self.beta);
        let mut hid = vec![0.0; rows * self.hidden];
        matmul(&normed, rows, width, &self.w1, self.hidden, &mut hid);
        add_bias(&mut hid, &self.b1);
        hid.iter_mut().for_each(|v| *v = gelu(*v));
        let mut gate = vec![0.0; rows * out_len];
        matmul(&hid, rows, self.hidden, &self.w2, out_len, &mut gate);
        add_bias(&mut gate, &self.b2);
        match self.variant {
            GateVariant::Fine => {
                for (g, v) in gate.iter_mut().zip(x) {
                    *g = sigmoid(*g) * v;
                }
                gate
            }
            GateVariant::Coarse => {
                let mut out = x.to_vec();
                for (row, g) in out.chunks_exact_mut(width).zip(gate.chunks_exact(out_len)) {
                    for (block, &gi) in row.chunks_exact_mut(self.dim).zip(g) {
                        let s = sigmoid(gi);
                        block.iter_mut().for_each(|v| *v *= s);
                    }
                }
                out
            }
        }
    }
}

struct SelfAttnEngine {
    sources: usize,
    dim: usize,
    ln1: (Vec<f32>, Vec<f32>),
    /// `[Wq | Wk | Wv]`, `d x 3d`.
    wqkv: Vec<f32>,
    bqkv: Vec<f32>,
    wo: Vec<f32>,
    bo: Vec<f32>,
    ln2: (Vec<f32>, Vec<f32>),
    ff_w1: Vec<f32>,
    ff_b1: Vec<f32>,
    ff_w2: Vec<f32>,
    ff_b2: Vec<f32>,
}

impl SelfAttnEngine {
    fn new(p: &SelfAttnParams) -> Self {
        let d = p.dim;
        let mut wqkv = Vec::with_capacity(3 * d * d);
        for r in 0..d {
            for w in [&p.wq, &p.wk, &p.wv] {
                wqkv.extend(w.row(r).iter().map(|&v| v as f32));
            }
        }
        let bqkv = [&p.bq, &p.bk, &p.bv]
            .into_iter()
            .flat_map(|b| f32s(b))
            .collect();
        Self {
            sources: p.sources,
            dim: d,
            ln1: (f32s(&p.ln1_scale), f32s(&p.ln1_shift)),
            wqkv,
            bqkv,
            wo: f32s(&p.wo.data),
            bo: f32s(&p.bo),
            ln2: (f32s(&p.ln2_scale), f32s(&p.ln2_shift)),
            ff_w1: f32s(&p.ff_w1.data),
            ff_b1: f32s(&p.ff_b1),
            ff_w2: f32s(&p.ff_w2.data),
            ff_b2: f32s(&p.ff_b2),
        }
    }

    fn fuse(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let (n, d) = (self.sources, self.dim);
        let hd = d / HEADS;
        let tokens = rows * n;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x1 = vec![0.0; x.len()];
        layer_norm_rows(x, &mut x1, &self.ln1.0, &self.ln1.1);
        let mut qkv = vec![0.0; tokens * 3 * d];
        matmul(&x1, tokens, d, &self.wqkv, 3 * d, &mut qkv);
        add_bias(&mut qkv, &self.bqkv);

        let mut o = vec![0.0f32; tokens * d];
        let mut scores = vec![0.0f32; n];
        for t in 0..rows {
            let base = t * n;
            for h in 0..HEADS {
                let span = h * hd..(h + 1) * hd;
                for i in 0..n {
                    let q = &qkv[(base + i) * 3 * d..][span.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &qkv[(base + j) * 3 * d + d..][span.clone()];
                        *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let oi = &mut o[(base + i) * d..][span.clone()];
                    for (j, &p) in scores.iter().enumerate() {
                        let v = &qkv[(base + j) * 3 * d + 2 * d..][span.clone()];
                        for (a, b) in oi.iter_mut().zip(v) {
                            *a += p / z * b;
                        }
                    }
                }
            }
        }

        let mut r = vec![0.0; tokens * d];
        matmul(&o, tokens, d, &self.wo, d, &mut r);
        add_bias(&mut r, &self.bo);
        r.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        let mut y = vec![0.0; tokens * d];
        layer_norm_rows(&r, &mut y, &self.ln2.0, &self.ln2.1);
        let hidden = self.ff_b1.len();
        let mut f = vec![0.0; tokens * hidden];
        matmul(&y, tokens, d, &self.ff_w1, hidden, &mut f);
        add_bias(&mut f, &self.ff_b1);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = vec![0.0; tokens * d];
        matmul(&f, tokens, hidden, &self.ff_w2, d, &mut out);
        add_bias(&mut out, &self.ff_b2);
        out.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        out
    }
}

struct HeadEngine {
    v: Vec<f32>,
    w: Vec<f32>,
    cls_w: Vec<f32>,
    cls_b: Vec<f32>,
    attn: usize,
}

impl HeadEngine {
    fn new(a: &AbmilParams) -> Self {
        Self {
            v: f32s(&a.attn_v.data),
            w: f32s(&a.attn_w),
            cls_w: f32s(&a.classifier_w.data),
            cls_b: f32s(&a.classifier_b),
            attn: a.attn_w.len(),
        }
    }

    fn scores(&self, fused: &[f32], rows: usize, width: usize) -> Vec<f32> {
        let mut u = vec![0.0; rows * self.attn];
        matmul(fused, rows, width, &self.v, self.attn, &mut u);
        u.chunks_exact(self.attn)
            .map(|row| row.iter().zip(&self.w).map(|(a, b)| a.tanh() * b).sum())
            .collect()
    }
}

/// Running softmax-weighted sum over chunks of tiles.
struct OnlinePool {
    max: f32,
    norm: f64,
    acc: Vec<f64>,
}

impl OnlinePool {
    fn new(width: usize) -> Self {
        Self {
            max: f32::NEG_INFINITY,
            norm: 0.0,
            acc: vec![0.0; width],
        }
    }

    fn push(&mut self, fused: &[f32], scores: &[f32]) {
        let m = scores.iter().copied().fold(self.max, f32::max);
        let rescale = ((self.max - m) as f64).exp();
        if rescale != 1.0 {
            self.norm *= rescale;
            self.acc.iter_mut().for_each(|a| *a *= rescale);
        }
        self.max = m;
        for (row, &s) in fused.chunks_exact(self.acc.len()).zip(scores) {
            let e = ((s - m) as f64).exp();
            self.norm += e;
            for (a, &v) in self.acc.iter_mut().zip(row) {
                *a += e * v as f64;
            }
        }
    }

    fn finish(self) -> Vec<f32> {
        self.acc.iter().map(|a| (a / self.norm) as f32).collect()
    }
}

enum FusionEngine {
    Tuner(FineEngine),
    SelfAttn(SelfAttnEngine),
    Concat,
}

/// f32 batched inference for a classification model.
pub struct InferenceEngine {
    fusion: FusionEngine,
    head: HeadEngine,
    width: usize,
    fused_width: usize,
    /// Tiles per chunk.
    pub chunk: usize,
}

impl InferenceEngine {
    /// Supports tuner, self-attention and concatenation fusions with the
    /// attention-MIL head.
    pub fn from_model(model: &FusionModel) -> Result<Self> {
        let unsupported =
            || Error::Invalid(format!("no batched inference for `{}`", model.spec.variant));
        let fusion = match &model.fusion {
            Fusion::Tuner(t) => FusionEngine::Tuner(FineEngine::new(t)),
            Fusion::SelfAttn(p) => FusionEngine::SelfAttn(SelfAttnEngine::new(p)),
            Fusion::Concat => FusionEngine::Concat,
            Fusion::Moe(_) | Fusion::Single(_) => return Err(unsupported()),
        };
        let head = match &model.head {
            Head::Abmil(a) => HeadEngine::new(a),
            Head::Regressor(_) => return Err(unsupported()),
        };
        Ok(Self {
            fusion,
            head,
            width: model.spec.sources() * model.spec.dim,
            fused_width: model.fused_len(),
            chunk: 512,
        })
    }

    /// Fused vectors of `rows` tiles stored row-major in `x`.
    pub fn fuse(&self, x: &[f32], rows: usize) -> Vec<f32> {
        assert_eq!(x.len(), rows * self.width, "input is not rows x (N * d)");
        match &self.fusion {
            FusionEngine::Tuner(e) => e.fuse(x, rows),
            FusionEngine::SelfAttn(e) => e.fuse(x, rows),
            FusionEngine::Concat => x.to_vec(),
        }
    }

    /// Bag logits for `x.len() / (N * d)` tiles.
    pub fn bag_logits(&self, x: &[f32]) -> Vec<f32> {
        let mut pool = OnlinePool::new(self.fused_width);
        for block in x.chunks(self.chunk * self.width) {
            let rows = block.len() / self.width;
            let fused = self.fuse(block, rows);
            let scores = self.head.scores(&fused, rows, self.fused_width);
            pool.push(&fused, &scores);
        }
        let z = pool.finish();
        let classes = self.head.cls_b.len();
        let mut logits = vec![0.0; classes];
        matmul(
            &z,
            1,
            self.fused_width,
            &self.head.cls_w,
            classes,
            &mut logits,
        );
        add_bias(&mut logits, &self.head.cls_b);
        logits
    }
}

/// Bag sizes from `lo` to `hi` inclusive in steps of `step`.
pub fn bag_sizes(lo: usize, hi: usize, step: usize) -> Vec<usize> {
    (lo..=hi).step_by(step.max(1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    pub sources: usize,
    pub d: usize,
    pub bag_sizes: Vec<usize>,
    pub repeats: usize,
    pub methods: Vec<Variant>,
    pub seed: u64,
    /// Stop starting new measurements after this many seconds.
    pub budget_secs: Option<f64>,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self {
            sources: 6,
            d: 512,
            bag_sizes: bag_sizes(2000, 40000, 2000),
            repeats: 5,
            methods: vec![Variant::Fine, Variant::SelfAttn],
            seed: 0,
            budget_secs: None,
        }
    }
}

/// One timed bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub method: String,
    pub bag_size: usize,
    pub repeat: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub method: String,
    pub d: usize,
    pub bag_sizes: Vec<usize>,
    /// Median over repeats of bags per second, per bag size.
    pub fps: Vec<f64>,
    pub mean_fps: f64,
    /// Repeats measured for each bag size.
    pub repeats: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRun {
    pub reports: Vec<ThroughputReport>,
    pub samples: Vec<Sample>,
    pub elapsed_secs: f64,
    /// False when the time budget cut the protocol short.
    pub complete: bool,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench_model(variant: Variant, sources: usize, d: usize, seed: u64) -> Result<FusionModel> {
    let ids = (0..sources).map(|i| format!("src{i}")).collect();
    let spec = ModelSpec::new(variant, TaskKind::Classification, ids, d, 2);
    Ok(FusionModel::new(spec, seed)?)
}

/// Random standard-normal features for `tiles` tiles.
pub fn random_features(tiles: usize, width: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, purpose::BENCH, &[]);
    (0..tiles * width)
        .map(|_| r.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Times bag inference for every method, bag size and repeat. Measurements
/// are interleaved (repeat, then bag size, then method) so slow drifts in
/// machine speed hit every method alike. All bags are prefixes of one random
/// feature pool.
pub fn throughput_bench(cfg: &ThroughputConfig) -> Result<ThroughputRun> {
    if cfg.repeats == 0
        || cfg.bag_sizes.is_empty()
        || cfg.methods.is_empty()
        || cfg.bag_sizes.contains(&0)
    {
        return Err(Error::Invalid(
            "need at least one method, bag size and repeat".into(),
        ));
    }
    let engines = cfg
        .methods
        .iter()
        .map(|v| {
            InferenceEngine::from_model(&bench_model(v.clone(), cfg.sources, cfg.d, cfg.seed)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let width = cfg.sources * cfg.d;
    let largest = *cfg.bag_sizes.iter().max().unwrap();
    let pool = random_features(largest, width, cfg.seed);

    let start = Instant::now();
    let budget = cfg.budget_secs.map(Duration::from_secs_f64);
    let mut samples = Vec::new();
    let mut complete = true;
    'outer: for repeat in 0..cfg.repeats {
        for &m in &cfg.bag_sizes {
            for (v, e) in cfg.methods.iter().zip(&engines) {
                if budget.is_some_and(|b| start.elapsed() >= b) {
                    complete = false;
                    break 'outer;
                }
                let t = Instant::now();
                let logits = e.bag_logits(&pool[..m * width]);
                let seconds = t.elapsed().as_secs_f64();
                if logits.iter().any(|l| !l.is_finite()) {
                    return Err(Error::Core(adafusion_core::Error::NonFiniteLoss(
                        samples.len(),
                    )));
                }
                samples.push(Sample {
                    method: v.to_string(),
                    bag_size: m,
                    repeat,
                    seconds,
                });
            }
        }
    }
    let reports = cfg
        .methods
        .iter()
        .map(|v| {
            let name = v.to_string();
            let mut sizes = Vec::new();
            let mut fps = Vec::new();
            let mut repeats = Vec::new();
            for &m in &cfg.bag_sizes {
                let rates: Vec<f64> = samples
                    .iter()
                    .filter(|s| s.method == name && s.bag_size == m)
                    .map(|s| 1.0 / s.seconds)
                    .collect();
                if !rates.is_empty() {
                    sizes.push(m);
                    fps.push(median(&rates));
                    repeats.push(rates.len());
                }
            }
            let mean_fps = if fps.is_empty() {
                0.0
            } else {
                fps.iter().sum::<f64>() / fps.len() as f64
            };
            ThroughputReport {
                method: name,
                d: cfg.d,
                bag_sizes: sizes,
                fps,
                mean_fps,
                repeats,
            }
        })
        .collect();
    Ok(ThroughputRun {
        reports,
        samples,
        elapsed_secs: start.elapsed().as_secs_f64(),
        complete,
    })
}
