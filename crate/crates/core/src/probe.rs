//! Reconstruction probe: a shallow decoder from warped, hole-ridden token
//! features to the target RGB image, trained with MSE and Adam.
//!
//! Per token the decoder applies a learned linear reducer `C_in → d`,
//! substitutes a learned mask token on holes, optionally mixes tokens with a
//! residual single-head self-attention layer, and maps each token through
//! `tanh(z W₁ + b₁) W₂ + b₂` to a `P × P × 3` patch. Patches are tiled
//! row-major into the image. All parameters live in one flat vector.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward_cached, attention_forward, AttentionBlockInput, AttentionCache, Mat};
use crate::geometry::WarpedPlane;
use crate::metrics::{self, inf_as_string, opt_inf_as_string};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Grid, Result};

/// Shape hyper-parameters of a [`ProbeDecoder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeArch {
    pub c_in: usize,
    pub c_red: usize,
    pub hidden: usize,
    pub patch: usize,
    pub attn: bool,
    /// Add fixed 2-D sin-cos position codes to every token after mask
    /// substitution.
    #[serde(default)]
    pub pos_embed: bool,
}

impl ProbeArch {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_red == 0 || self.hidden == 0 || self.patch == 0 {
            return Err(Error::input("probe dimensions must be positive"));
        }
        Ok(())
    }

    pub fn out_per_token(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, h, o) = (self.c_red, self.hidden, self.out_per_token());
        let mut out = vec![
            ("reducer_w", vec![self.c_in, d]),
            ("reducer_b", vec![d]),
            ("mask_token", vec![d]),
        ];
        if self.attn {
            out.push(("attn_wq", vec![d, d]));
            out.push(("attn_wk", vec![d, d]));
            out.push(("attn_wv", vec![d, d]));
        }
        out.extend([
            ("mlp_w1", vec![d, h]),
            ("mlp_b1", vec![h]),
            ("mlp_w2", vec![h, o]),
            ("mlp_b2", vec![o]),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Span {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct Layout {
    reducer_w: Span,
    reducer_b: Span,
    mask_token: Span,
    attn: Option<[Span; 3]>,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

impl Layout {
    fn new(arch: &ProbeArch) -> Self {
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let s = Span { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let (d, h, o) = (arch.c_red, arch.hidden, arch.out_per_token());
        let reducer_w = take(arch.c_in, d);
        let reducer_b = take(1, d);
        let mask_token = take(1, d);
        let attn = arch.attn.then(|| [take(d, d), take(d, d), take(d, d)]);
        let w1 = take(d, h);
        let b1 = take(1, h);
        let w2 = take(h, o);
        let b2 = take(1, o);
        Self {
            reducer_w,
            reducer_b,
            mask_token,
            attn,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeDecoder {
    arch: ProbeArch,
    layout: Layout,
    params: Vec<f64>,
    /// Fixed per-channel input standardization `(x − shift) · scale`.
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    version: u64,
}

impl PartialEq for ProbeDecoder {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params == other.params
            && self.input_shift == other.input_shift
            && self.input_scale == other.input_scale
    }
}

impl ProbeDecoder {
    /// Seeded initialization: scaled Gaussian weights, zero biases and mask
    /// token, output bias 0.5 (mid-gray).
    pub fn new(arch: ProbeArch, seed: u64) -> Result<Self> {
        let mut dec = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = dec.layout.clone();
        let mut fill = |p: &mut [f64], span: Span, std: f64| {
            for v in &mut p[span.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let d = arch.c_red as f64;
        fill(&mut dec.params, l.reducer_w, 1.0 / (arch.c_in as f64).sqrt());
        if let Some(spans) = l.attn {
            for s in spans {
                fill(&mut dec.params, s, 1.0 / d.sqrt());
            }
        }
        fill(&mut dec.params, l.w1, 1.0 / d.sqrt());
        fill(&mut dec.params, l.w2, 0.1 / (arch.hidden as f64).sqrt());
        dec.params[l.b2.range()].fill(0.5);
        Ok(dec)
    }

    /// All parameters zero.
    pub fn zeros(arch: ProbeArch) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        Ok(Self {
            arch,
            layout,
            params: vec![0.0; arch.num_params()],
            input_shift: vec![0.0; arch.c_in],
            input_scale: vec![1.0; arch.c_in],
            version: 0,
        })
    }

    pub fn from_params(arch: ProbeArch, params: Vec<f64>) -> Result<Self> {
        let mut dec = Self::zeros(arch)?;
        if params.len() != dec.params.len() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                dec.params.len(),
                params.len()
            )));
        }
        dec.params = params;
        Ok(dec)
    }

    /// Sets the fixed input standardization; `std` entries of zero leave the
    /// channel unscaled.
    pub fn set_input_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.arch.c_in || std.len() != self.arch.c_in {
            return Err(Error::input("normalization length differs from input channels"));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&v| v < 0.0) {
            return Err(Error::input("normalization statistics must be finite, std >= 0"));
        }
        self.input_shift = mean;
        self.input_scale = std.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 1.0 }).collect();
        self.version += 1;
        Ok(())
    }

    /// `(shift, scale)` of the input standardization.
    pub fn input_normalization(&self) -> (&[f64], &[f64]) {
        (&self.input_shift, &self.input_scale)
    }

    /// Restores a standardization previously read via [`Self::input_normalization`].
    pub fn set_raw_input_normalization(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        if shift.len() != self.arch.c_in || scale.len() != self.arch.c_in {
            return Err(Error::input("normalization length differs from input channels"));
        }
        self.input_shift = shift;
        self.input_scale = scale;
        self.version += 1;
        Ok(())
    }

    pub fn arch(&self) -> &ProbeArch {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// `(name, shape, values)` for every parameter tensor.
    pub fn named_tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut offset = 0;
        self.arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let t = &self.params[offset..offset + n];
                offset += n;
                (name, shape, t)
            })
            .collect()
    }

    /// Offset range of the named tensor inside the flat parameter vector.
    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for (n, shape) in self.arch.tensor_shapes() {
            let len: usize = shape.iter().product();
            if n == name {
                return Some(offset..offset + len);
            }
            offset += len;
        }
        None
    }

    fn mat(&self, span: Span) -> Mat {
        Mat::from_vec(span.rows, span.cols, self.params[span.range()].to_vec()).expect("span shape")
    }

    fn vector(&self, span: Span) -> &[f64] {
        &self.params[span.range()]
    }

    /// Predicts the target image from a token-resolution warped plane.
    pub fn forward(&self, input: &WarpedPlane) -> Result<ProbeForward> {
        let c_in = input.payload.channels();
        if c_in != self.arch.c_in {
            return Err(Error::input(format!(
                "warped plane has {c_in} channels, decoder expects {}",
                self.arch.c_in
            )));
        }
        let (rows, cols) = (input.height(), input.width());
        let n = rows * cols;
        if input.mask.len() != n {
            return Err(Error::input("warped plane mask does not match its payload"));
        }
        let l = &self.layout;
        let d = self.arch.c_red;
        let mut x0 = Mat::from_vec(n, c_in, input.payload.data().to_vec())?;
        for i in (0..n).filter(|&i| !input.mask[i]) {
            for ((v, m), s) in x0.row_mut(i).iter_mut().zip(&self.input_shift).zip(&self.input_scale) {
                *v = (*v - m) * s;
            }
        }
        let mut x = x0.matmul(&self.mat(l.reducer_w));
        let (bias, mask_token) = (self.vector(l.reducer_b), self.vector(l.mask_token));
        for i in 0..n {
            let row = x.row_mut(i);
            if input.mask[i] {
                row.copy_from_slice(mask_token);
            } else {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        if self.arch.pos_embed {
            let pe = sincos_2d(rows, cols, d);
            x.data.iter_mut().zip(&pe.data).for_each(|(v, p)| *v += p);
        }
        let (z, attn) = match l.attn {
            Some([wq, wk, wv]) => {
                let block = AttentionBlockInput {
                    q: x.matmul(&self.mat(wq)),
                    target_kv: (x.matmul(&self.mat(wk)), x.matmul(&self.mat(wv))),
                    ref_kv: Vec::new(),
                };
                let (a, cache) = attention_forward(&block)?;
                let mut z = x.clone();
                z.data.iter_mut().zip(&a.data).for_each(|(v, a)| *v += a);
                (z, Some((block, cache)))
            }
            None => (x.clone(), None),
        };
        debug_assert_eq!(z.cols, d);
        let mut h1 = z.matmul(&self.mat(l.w1));
        add_bias(&mut h1, self.vector(l.b1));
        h1.data.iter_mut().for_each(|v| *v = v.tanh());
        let mut y = h1.matmul(&self.mat(l.w2));
        add_bias(&mut y, self.vector(l.b2));
        let image = unpatchify(&y, rows, cols, self.arch.patch)?;
        Ok(ProbeForward {
            image,
            cache: ProbeCache {
                version: self.version,
                patch: self.arch.patch,
                cols,
                x0,
                masked: input.mask.clone(),
                x,
                attn,
                z,
                h1,
            },
        })
    }
}

/// Fixed 2-D sin-cos codes: the first half of the channels encodes the token
/// row, the second half the column, each as interleaved `sin, cos` pairs at
/// frequencies `10000^(-k/K)`.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = Mat::zeros(rows * cols, dim);
    let encode = |pos: usize, dst: &mut [f64]| {
        for k in 0..pairs {
            let omega = 10000f64.powf(-(k as f64) / pairs.max(1) as f64);
            let a = pos as f64 * omega;
            dst[2 * k] = a.sin();
            dst[2 * k + 1] = a.cos();
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let row = out.row_mut(r * cols + c);
            let (first, second) = row.split_at_mut(half);
            encode(r, first);
            encode(c, second);
        }
    }
    out
}

fn add_bias(m: &mut Mat, bias: &[f64]) {
    for r in 0..m.rows {
        m.row_mut(r).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn column_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        out.iter_mut().zip(m.row(r)).for_each(|(o, v)| *o += v);
    }
    out
}

/// Tiles per-token `P·P·3` rows into a `(rows·P) × (cols·P) × 3` image.
pub fn unpatchify(tokens: &Mat, rows: usize, cols: usize, patch: usize) -> Result<Grid> {
    if tokens.rows != rows * cols || tokens.cols != patch * patch * 3 {
        return Err(Error::input("token matrix does not match the patch layout"));
    }
    let mut img = Grid::zeros(rows * patch, cols * patch, 3);
    for ti in 0..rows {
        for tj in 0..cols {
            let t = tokens.row(ti * cols + tj);
            for dr in 0..patch {
                for dc in 0..patch {
                    let k = (dr * patch + dc) * 3;
                    img.at_mut(ti * patch + dr, tj * patch + dc)
                        .copy_from_slice(&t[k..k + 3]);
                }
            }
        }
    }
    Ok(img)
}

/// Inverse of [`unpatchify`].
pub fn patchify(image: &Grid, patch: usize) -> Result<Mat> {
    if patch == 0 || image.channels() != 3 || image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::input("image does not tile into RGB patches"));
    }
    let (rows, cols) = (image.height() / patch, image.width() / patch);
    let mut out = Mat::zeros(rows * cols, patch * patch * 3);
    for ti in 0..rows {
        for tj in 0..cols {
            let t = out.row_mut(ti * cols + tj);
            for dr in 0..patch {
                for dc in 0..patch {
                    let k = (dr * patch + dc) * 3;
                    t[k..k + 3].copy_from_slice(image.at(ti * patch + dr, tj * patch + dc));
                }
            }
        }
    }
    Ok(out)
}

/// Forward intermediates kept for [`probe_backward`].
#[derive(Debug, Clone)]
pub struct ProbeCache {
    version: u64,
    patch: usize,
    cols: usize,
    x0: Mat,
    masked: Vec<bool>,
    x: Mat,
    attn: Option<(AttentionBlockInput, AttentionCache)>,
    z: Mat,
    h1: Mat,
}

impl ProbeCache {
    /// Pixel-level hole mask: pixels whose token had no warped feature.
    pub fn hole_pixels(&self) -> Vec<bool> {
        hole_pixels(&self.masked, self.cols, self.patch)
    }
}

/// Expands a token hole mask (`cols` tokens per row) to pixels.
pub fn hole_pixels(token_mask: &[bool], cols: usize, patch: usize) -> Vec<bool> {
    let rows = token_mask.len() / cols.max(1);
    let width = cols * patch;
    let mut out = vec![false; rows * patch * width];
    for (cell, m) in out.iter_mut().enumerate() {
        let (r, c) = (cell / width, cell % width);
        *m = token_mask[(r / patch) * cols + c / patch];
    }
    out
}

#[derive(Debug, Clone)]
pub struct ProbeForward {
    /// Unclamped prediction.
    pub image: Grid,
    pub cache: ProbeCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    /// Diagnostics only; `None` when the region is empty or not requested.
    pub visible_mse: Option<f64>,
    pub hole_mse: Option<f64>,
}

/// Mean squared error over all pixels and channels. With `holes` given,
/// visible- and hole-region errors are reported alongside (the loss itself
/// stays unweighted).
pub fn probe_loss(pred: &Grid, target: &Grid, holes: Option<&[bool]>) -> Result<LossReport> {
    let mse = metrics::mse(pred, target, None)?;
    let (visible_mse, hole_mse) = match holes {
        Some(h) => {
            if h.len() != pred.cells() {
                return Err(Error::input("hole mask does not match image size"));
            }
            let vis: Vec<bool> = h.iter().map(|m| !m).collect();
            (
                metrics::mse(pred, target, Some(&vis)).ok(),
                metrics::mse(pred, target, Some(h)).ok(),
            )
        }
        None => (None, None),
    };
    Ok(LossReport {
        mse,
        visible_mse,
        hole_mse,
    })
}

/// Gradient of `scale · MSE(pred, target)` with respect to every decoder
/// parameter, in the flat parameter order.
pub fn probe_backward(
    decoder: &ProbeDecoder,
    fwd: &ProbeForward,
    target: &Grid,
    scale: f64,
) -> Result<Vec<f64>> {
    let cache = &fwd.cache;
    if cache.version != decoder.version || cache.x0.cols != decoder.arch.c_in {
        return Err(Error::State("probe cache is stale; run forward again".into()));
    }
    if !fwd.image.same_shape(target) {
        return Err(Error::input("target image does not match the prediction"));
    }
    let l = &decoder.layout;
    let mut grads = vec![0.0; decoder.num_params()];
    let norm = 2.0 * scale / fwd.image.data().len() as f64;
    let diff = fwd
        .image
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| norm * (p - t))
        .collect();
    let d_img = Grid::from_vec(target.height(), target.width(), 3, diff)?;
    let dy = patchify(&d_img, cache.patch)?;

    grads[l.w2.range()].copy_from_slice(&cache.h1.t_matmul(&dy).data);
    grads[l.b2.range()].copy_from_slice(&column_sums(&dy));
    let mut da1 = dy.matmul_t(&decoder.mat(l.w2));
    da1.data
        .iter_mut()
        .zip(&cache.h1.data)
        .for_each(|(g, h)| *g *= 1.0 - h * h);
    grads[l.w1.range()].copy_from_slice(&cache.z.t_matmul(&da1).data);
    grads[l.b1.range()].copy_from_slice(&column_sums(&da1));
    let dz = da1.matmul_t(&decoder.mat(l.w1));

    let dx = match (&cache.attn, l.attn) {
        (Some((block, acache)), Some([wq, wk, wv])) => {
            let ag = attention_backward_cached(block, acache, &dz)?;
            let (dk, dv) = &ag.d_target;
            grads[wq.range()].copy_from_slice(&cache.x.t_matmul(&ag.dq).data);
            grads[wk.range()].copy_from_slice(&cache.x.t_matmul(dk).data);
            grads[wv.range()].copy_from_slice(&cache.x.t_matmul(dv).data);
            let mut dx = dz;
            for (g, w) in [(&ag.dq, wq), (dk, wk), (dv, wv)] {
                let part = g.matmul_t(&decoder.mat(w));
                dx.data.iter_mut().zip(&part.data).for_each(|(a, b)| *a += b);
            }
            dx
        }
        _ => dz,
    };

    let mut dr = dx;
    let mask_range = l.mask_token.range();
    for (i, &m) in cache.masked.iter().enumerate() {
        if m {
            let row = dr.row_mut(i);
            grads[mask_range.clone()]
                .iter_mut()
                .zip(row.iter())
                .for_each(|(g, v)| *g += v);
            row.fill(0.0);
        }
    }
    grads[l.reducer_w.range()].copy_from_slice(&cache.x0.t_matmul(&dr).data);
    grads[l.reducer_b.range()].copy_from_slice(&column_sums(&dr));
    Ok(grads)
}

/// Loss and gradient of one sample at the current parameters.
pub fn loss_and_grad(decoder: &ProbeDecoder, sample: &ProbeSample) -> Result<(f64, Vec<f64>)> {
    let fwd = decoder.forward(&sample.input)?;
    let loss = probe_loss(&fwd.image, &sample.target, None)?.mse;
    let grads = probe_backward(decoder, &fwd, &sample.target, 1.0)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples per step.
    pub batch: usize,
    pub seed: u64,
    pub attn_enabled: bool,
    #[serde(default)]
    pub pos_embed: bool,
    /// Standardize input channels with training-set statistics.
    #[serde(default)]
    pub standardize: bool,
    pub reduced_channels: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 2000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch: 4,
            seed: 0,
            attn_enabled: false,
            pos_embed: false,
            standardize: false,
            reduced_channels: 32,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    /// Probe settings paired with the benchmark suite.
    pub fn benchmark() -> Self {
        Self {
            batch: 8,
            attn_enabled: true,
            pos_embed: true,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::input("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning_rate must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::input("batch must be at least 1"));
        }
        self.adam().validate()
    }
}

/// A warped token plane with its target image.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub input: WarpedPlane,
    pub target: Grid,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub decoder: ProbeDecoder,
    /// Mean batch loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Architecture implied by a dataset and config.
pub fn infer_arch(dataset: &[ProbeSample], cfg: &TrainConfig) -> Result<ProbeArch> {
    let first = dataset.first().ok_or_else(|| Error::input("training set is empty"))?;
    let c_in = first.input.payload.channels();
    let (rows, cols) = (first.input.height(), first.input.width());
    if rows == 0 || first.target.height() % rows != 0 {
        return Err(Error::input("target height is not a multiple of the token rows"));
    }
    let patch = first.target.height() / rows;
    for s in dataset {
        if s.input.payload.channels() != c_in
            || s.input.height() != rows
            || s.input.width() != cols
            || s.target.height() != rows * patch
            || s.target.width() != cols * patch
            || s.target.channels() != 3
        {
            return Err(Error::input("training samples disagree in shape"));
        }
    }
    let arch = ProbeArch {
        c_in,
        c_red: cfg.reduced_channels,
        hidden: cfg.hidden,
        patch,
        attn: cfg.attn_enabled,
        pos_embed: cfg.pos_embed,
    };
    arch.validate()?;
    Ok(arch)
}

/// Trains a fresh decoder with Adam. Each epoch visits the samples in a
/// seeded shuffled order, `batch` at a time; the batch gradient is the mean
/// of per-sample gradients summed in that order.
pub fn train_probe(dataset: &[ProbeSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = infer_arch(dataset, cfg)?;
    let mut decoder = ProbeDecoder::new(arch, cfg.seed)?;
    if cfg.standardize {
        let (mean, std) = input_statistics(dataset)?;
        decoder.set_input_normalization(mean, std)?;
    }
    continue_training(decoder, dataset, cfg)
}

/// Per-channel mean and standard deviation over the covered tokens of a
/// dataset.
pub fn input_statistics(dataset: &[ProbeSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = dataset
        .first()
        .ok_or_else(|| Error::input("training set is empty"))?
        .input
        .payload
        .channels();
    let (mut sum, mut sum_sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
    for s in dataset {
        for cell in (0..s.input.mask.len()).filter(|&k| !s.input.mask[k]) {
            for (k, v) in s.input.payload.cell(cell).iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok((vec![0.0; c], vec![1.0; c]));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
        .collect();
    Ok((mean, std))
}

/// Like [`train_probe`] but starting from an existing decoder.
pub fn continue_training(
    mut decoder: ProbeDecoder,
    dataset: &[ProbeSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::input("steps and batch must be at least 1"));
    }
    let mut adam = Adam::new(cfg.adam(), decoder.num_params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0bad_cafe);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut batch_grad = vec![0.0; decoder.num_params()];
    for step in 0..cfg.steps {
        batch_grad.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (loss, g) = loss_and_grad(&decoder, &dataset[order[cursor]])?;
            cursor += 1;
            batch_loss += loss;
            batch_grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / cfg.batch as f64;
        batch_loss *= inv;
        if !batch_loss.is_finite() {
            return Err(Error::numerical(format!("training loss is not finite at step {step}")));
        }
        batch_grad.iter_mut().for_each(|g| *g *= inv);
        curve.push(batch_loss);
        adam.step(decoder.params_mut(), &batch_grad);
    }
    Ok(TrainOutcome {
        decoder,
        loss_curve: curve,
    })
}

/// Sample plus the number of reference views that produced it.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub input: WarpedPlane,
    pub target: Grid,
    pub view_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub view_count: usize,
    #[serde(with = "inf_as_string")]
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(with = "opt_inf_as_string")]
    pub psnr_visible_db: Option<f64>,
    #[serde(with = "opt_inf_as_string")]
    pub psnr_hole_db: Option<f64>,
    pub hole_fraction: f64,
}

/// Scores a (clamped) prediction; `holes` is the pixel-level hole mask.
pub fn score_image(pred: &Grid, target: &Grid, holes: &[bool], view_count: usize) -> Result<SampleMetrics> {
    let visible: Vec<bool> = holes.iter().map(|h| !h).collect();
    let psnr_db = metrics::psnr(pred, target, None)?;
    let region = |mask: &[bool]| {
        if mask.iter().any(|&m| m) {
            metrics::psnr(pred, target, Some(mask)).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(SampleMetrics {
        view_count,
        psnr_db,
        ssim: metrics::ssim(pred, target)?,
        psnr_visible_db: region(&visible)?,
        psnr_hole_db: region(holes)?,
        hole_fraction: holes.iter().filter(|&&h| h).count() as f64 / holes.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub num_samples: usize,
    #[serde(with = "inf_as_string")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_hole_fraction: f64,
}

impl GroupSummary {
    fn of<'a>(items: impl IntoIterator<Item = &'a SampleMetrics>) -> Self {
        let (mut n, mut p, mut s, mut h) = (0usize, 0.0, 0.0, 0.0);
        for m in items {
            n += 1;
            p += m.psnr_db;
            s += m.ssim;
            h += m.hole_fraction;
        }
        let k = n.max(1) as f64;
        Self {
            num_samples: n,
            mean_psnr_db: p / k,
            mean_ssim: s / k,
            mean_hole_fraction: h / k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: GroupSummary,
    /// Keyed by number of reference views.
    pub by_view_count: BTreeMap<usize, GroupSummary>,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::input("evaluation set is empty"));
        }
        let mut counts: Vec<usize> = per_sample.iter().map(|m| m.view_count).collect();
        counts.sort_unstable();
        counts.dedup();
        let by_view_count = counts
            .into_iter()
            .map(|v| (v, GroupSummary::of(per_sample.iter().filter(|m| m.view_count == v))))
            .collect();
        Ok(Self {
            overall: GroupSummary::of(&per_sample),
            by_view_count,
            per_sample,
        })
    }
}

/// Scores the decoder's clamped predictions on `samples`.
pub fn eval_probe(decoder: &ProbeDecoder, samples: &[EvalSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let per_sample = samples
        .iter()
        .map(|s| {
            let fwd = decoder.forward(&s.input)?;
            let holes = fwd.cache.hole_pixels();
            score_image(&fwd.image.clamp01(), &s.target, &holes, s.view_count)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(attn: bool) -> ProbeArch {
        ProbeArch {
            c_in: 5,
            c_red: 4,
            hidden: 6,
            patch: 2,
            attn,
            pos_embed: attn,
        }
    }

    fn plane(rows: usize, cols: usize, c: usize, seed: u64, holes: &[usize]) -> WarpedPlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut payload = Grid::zeros(rows, cols, c);
        payload.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut mask = vec![false; rows * cols];
        for &h in holes {
            mask[h] = true;
            payload.cell_mut(h).fill(0.0);
        }
        WarpedPlane {
            payload,
            depth: vec![1.0; rows * cols],
            mask,
            has_coords: false,
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Grid::from_vec(h, w, 3, data).unwrap()
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let dec = ProbeDecoder::zeros(arch(true)).unwrap();
        let out = dec.forward(&plane(3, 2, 5, 1, &[0])).unwrap();
        assert_eq!((out.image.height(), out.image.width()), (6, 4));
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_masked_input_gives_identical_patches() {
        let no_pos = ProbeArch {
            pos_embed: false,
            ..arch(true)
        };
        let dec = ProbeDecoder::new(no_pos, 3).unwrap();
        let out = dec.forward(&plane(2, 3, 5, 2, &[0, 1, 2, 3, 4, 5])).unwrap();
        let tokens = patchify(&out.image, 2).unwrap();
        for r in 1..tokens.rows {
            assert_eq!(tokens.row(r), tokens.row(0));
        }
    }

    #[test]
    fn patchify_inverts_unpatchify() {
        let img = image(6, 8, 4);
        let tokens = patchify(&img, 2).unwrap();
        assert_eq!(unpatchify(&tokens, 3, 4, 2).unwrap(), img);
        assert_eq!(patchify(&unpatchify(&tokens, 3, 4, 2).unwrap(), 2).unwrap(), tokens);
    }

    #[test]
    fn channel_mismatch_is_input_error() {
        let dec = ProbeDecoder::new(arch(false), 0).unwrap();
        assert!(matches!(dec.forward(&plane(2, 2, 4, 0, &[])), Err(Error::Input(_))));
    }

    #[test]
    fn loss_values() {
        let t = image(4, 4, 5);
        assert_eq!(probe_loss(&t, &t, None).unwrap().mse, 0.0);
        let shifted = t.map(|v| v + 0.1);
        assert!((probe_loss(&shifted, &t, None).unwrap().mse - 0.01).abs() < 1e-12);
        let holes: Vec<bool> = (0..16).map(|k| k < 4).collect();
        let r = probe_loss(&shifted, &t, Some(&holes)).unwrap();
        assert!((r.hole_mse.unwrap() - 0.01).abs() < 1e-12);
        assert!(probe_loss(&t, &image(4, 2, 0), None).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let (a, b) = (image(6, 5, 7), image(6, 5, 8));
        let mut sum = 0.0;
        for k in 0..a.data().len() {
            sum += (a.data()[k] - b.data()[k]).powi(2);
        }
        let naive = sum / a.data().len() as f64;
        assert!((probe_loss(&a, &b, None).unwrap().mse - naive).abs() < 1e-12);
    }

    #[test]
    fn mask_token_gradient_only_from_masked_cells() {
        let dec = ProbeDecoder::new(arch(true), 1).unwrap();
        let range = dec.tensor_range("mask_token").unwrap();
        let target = image(4, 6, 9);
        let fwd = dec.forward(&plane(2, 3, 5, 3, &[])).unwrap();
        let g = probe_backward(&dec, &fwd, &target, 1.0).unwrap();
        assert!(g[range.clone()].iter().all(|&v| v == 0.0));
        let fwd = dec.forward(&plane(2, 3, 5, 3, &[4])).unwrap();
        let g = probe_backward(&dec, &fwd, &target, 1.0).unwrap();
        assert!(g[range].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn doubled_loss_doubles_gradients() {
        let dec = ProbeDecoder::new(arch(true), 2).unwrap();
        let target = image(4, 6, 10);
        let fwd = dec.forward(&plane(2, 3, 5, 4, &[1])).unwrap();
        let g1 = probe_backward(&dec, &fwd, &target, 1.0).unwrap();
        let g2 = probe_backward(&dec, &fwd, &target, 2.0).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn stale_cache_is_state_error() {
        let mut dec = ProbeDecoder::new(arch(false), 2).unwrap();
        let target = image(4, 6, 10);
        let fwd = dec.forward(&plane(2, 3, 5, 4, &[])).unwrap();
        dec.params_mut()[0] += 1.0;
        assert!(matches!(probe_backward(&dec, &fwd, &target, 1.0), Err(Error::State(_))));
    }

    fn finite_difference_check(attn: bool) {
        let mut dec = ProbeDecoder::new(arch(attn), 11).unwrap();
        let sample = ProbeSample {
            input: plane(3, 3, 5, 12, &[2, 6]),
            target: image(6, 6, 13),
        };
        let (_, g) = loss_and_grad(&dec, &sample).unwrap();
        let h = 1e-5;
        for k in 0..dec.num_params() {
            let orig = dec.params()[k];
            dec.params_mut()[k] = orig + h;
            let (lp, _) = loss_and_grad(&dec, &sample).unwrap();
            dec.params_mut()[k] = orig - h;
            let (lm, _) = loss_and_grad(&dec, &sample).unwrap();
            dec.params_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: analytic {} vs fd {fd}", g[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(false);
        finite_difference_check(true);
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_is_flat() {
        let data: Vec<ProbeSample> = (0..3)
            .map(|s| ProbeSample {
                input: plane(2, 2, 5, s, &[]),
                target: image(4, 4, 100 + s),
            })
            .collect();
        let cfg = TrainConfig {
            steps: 20,
            batch: 2,
            reduced_channels: 4,
            hidden: 8,
            ..TrainConfig::default()
        };
        let a = train_probe(&data, &cfg).unwrap();
        let b = train_probe(&data, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.decoder, b.decoder);

        let init = ProbeDecoder::new(infer_arch(&data, &cfg).unwrap(), cfg.seed).unwrap();
        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..cfg.clone()
        };
        let out = continue_training(init.clone(), &data[..1], &frozen).unwrap();
        assert_eq!(out.decoder.params(), init.params());
        assert!(out.loss_curve.iter().all(|&l| l == out.loss_curve[0]));

        assert!(train_probe(&[], &cfg).is_err());
        assert!(train_probe(&data, &TrainConfig { steps: 0, ..cfg }).is_err());
    }

    #[test]
    fn single_sample_overfit() {
        let sample = ProbeSample {
            input: plane(4, 4, 5, 21, &[3]),
            target: Grid::filled(16, 16, 3, 0.8),
        };
        let cfg = TrainConfig {
            steps: 500,
            batch: 1,
            ..TrainConfig::default()
        };
        let out = train_probe(std::slice::from_ref(&sample), &cfg).unwrap();
        let (first, last) = (out.loss_curve[0], *out.loss_curve.last().unwrap());
        assert!(last < 0.1 * first, "loss {first} -> {last}");
        let eval = EvalSample {
            input: sample.input,
            target: sample.target,
            view_count: 1,
        };
        let report = eval_probe(&out.decoder, &[eval]).unwrap();
        assert!(report.overall.mean_psnr_db > 25.0, "{}", report.overall.mean_psnr_db);
        assert!(eval_probe(&out.decoder, &[]).is_err());
    }
}
