//! Object-contextual attention blocks on intermediate features and their
//! fusion into the final head.
//!
//! A block pools stage features into one soft region per coarse class,
//! attends from every pixel to those regions and projects
//! `[features ∥ context]` back to `out_channels`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::toynet::layers::{concat_channels, conv2d, conv2d_backward, resize, resize_backward, split_channels};
use crate::toynet::{Network, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OcrBlockParams {
    pub stage_id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Pixel to key, `[out, in]`.
    pub wq: Vec<f64>,
    /// Region to key, `[out, in]`.
    pub wk: Vec<f64>,
    /// Region to value, `[out, in]`.
    pub wv: Vec<f64>,
    /// Output projection of `[features ∥ context]`, `[out, in + out]`.
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

impl OcrBlockParams {
    pub fn zeros(stage_id: usize, in_channels: usize, out_channels: usize) -> Self {
        let (c, o) = (in_channels, out_channels);
        Self {
            stage_id,
            in_channels,
            out_channels,
            wq: vec![0.0; o * c],
            wk: vec![0.0; o * c],
            wv: vec![0.0; o * c],
            wo: vec![0.0; o * (c + o)],
            bo: vec![0.0; o],
        }
    }

    /// Uniform fan-in initialisation from the `init` stream of `seed`.
    pub fn init(stage_id: usize, in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut p = Self::zeros(stage_id, in_channels, out_channels);
        let prefix = format!("ocr{stage_id}");
        for (name, values, fan_in) in [
            ("wq", &mut p.wq, in_channels),
            ("wk", &mut p.wk, in_channels),
            ("wv", &mut p.wv, in_channels),
            ("wo", &mut p.wo, in_channels + out_channels),
        ] {
            let mut r = rng::named(seed, &format!("init.{prefix}.{name}"));
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in values.iter_mut() {
                *v = r.random_range(-bound..bound);
            }
        }
        p
    }

    /// Width of the projected region representation (keys and values).
    pub fn region_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_params(&self) -> usize {
        block_param_count(self.in_channels, self.out_channels)
    }

    fn validate(&self) -> Result<()> {
        let (c, o) = (self.in_channels, self.out_channels);
        let ok = self.wq.len() == o * c
            && self.wk.len() == o * c
            && self.wv.len() == o * c
            && self.wo.len() == o * (c + o)
            && self.bo.len() == o;
        if !ok || c == 0 || o == 0 {
            return Err(Error::Shape(format!("OCR block {} weights do not match {c}->{o}", self.stage_id)));
        }
        Ok(())
    }
}

fn block_param_count(c: usize, o: usize) -> usize {
    3 * o * c + o * (c + o) + o
}

/// Intermediate values of one block forward, kept for backward and inspection.
#[derive(Clone, Debug)]
pub struct OcrTrace {
    pub features: Tensor,
    /// Spatial softmax of the coarse logits, `[batch, regions, h, w]`.
    pub region_weights: Tensor,
    /// Per sample `regions × in_channels`.
    pub regions: Vec<Vec<f64>>,
    queries: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// Softmax over regions per pixel, `[batch, regions, h, w]`.
    pub attention: Tensor,
    context: Vec<Vec<f64>>,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct OcrGrads {
    pub d_features: Tensor,
    pub d_logits: Tensor,
    pub params: OcrBlockParams,
}

pub fn ocr_block_forward(features: &Tensor, coarse_logits: &Tensor, params: &OcrBlockParams) -> Result<Tensor> {
    Ok(ocr_block_trace(features, coarse_logits, params)?.output)
}

/// `m × n` times `n × p`, where `ta`/`tb` mean the stored operand is the transpose.
#[allow(clippy::too_many_arguments)]
fn mm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for l in 0..n {
            let av = if ta { a[l * m + i] } else { a[i * n + l] };
            if tb {
                for j in 0..p {
                    out[i * p + j] += av * b[j * n + l];
                }
            } else {
                let brow = &b[l * p..(l + 1) * p];
                for (o, bv) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= sum;
        }
    }
    out
}

/// Softmax down each column of a `rows × cols` matrix.
fn softmax_cols(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let max = (0..rows).map(|r| x[r * cols + c]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in 0..rows {
            let e = (x[r * cols + c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for r in 0..rows {
            out[r * cols + c] /= sum;
        }
    }
    out
}

pub fn ocr_block_trace(features: &Tensor, coarse_logits: &Tensor, params: &OcrBlockParams) -> Result<OcrTrace> {
    params.validate()?;
    let (b, c, h, w) = features.dims4();
    let (lb, k, lh, lw) = coarse_logits.dims4();
    if k == 0 {
        return Err(Error::Shape("coarse logits have no classes".into()));
    }
    if (lb, lh, lw) != (b, h, w) {
        return Err(Error::Shape(format!(
            "coarse logits {:?} vs features {:?}",
            coarse_logits.shape(),
            features.shape()
        )));
    }
    if c != params.in_channels {
        return Err(Error::Shape(format!("features have {c} channels, block expects {}", params.in_channels)));
    }
    let o = params.out_channels;
    let p = h * w;
    let scale = 1.0 / (o as f64).sqrt();
    let mut weights = Tensor::zeros(&[b, k, h, w]);
    let mut attention = Tensor::zeros(&[b, k, h, w]);
    let mut output = Tensor::zeros(&[b, o, h, w]);
    let (mut regions, mut queries, mut keys, mut values, mut context) = (vec![], vec![], vec![], vec![], vec![]);
    for s in 0..b {
        let f = features.sample(s);
        let wt = softmax_rows(coarse_logits.sample(s), k, p);
        let r = mm(&wt, false, f, true, k, p, c);
        let q = mm(&params.wq, false, f, false, o, c, p);
        let kk = mm(&r, false, &params.wk, true, k, c, o);
        let v = mm(&r, false, &params.wv, true, k, c, o);
        let mut sim = mm(&kk, false, &q, false, k, o, p);
        for x in &mut sim {
            *x *= scale;
        }
        let a = softmax_cols(&sim, k, p);
        let ctx = mm(&v, true, &a, false, o, k, p);
        let mut x = f.to_vec();
        x.extend_from_slice(&ctx);
        let mut out = mm(&params.wo, false, &x, false, o, c + o, p);
        for j in 0..o {
            for v in &mut out[j * p..(j + 1) * p] {
                *v += params.bo[j];
            }
        }
        weights.data_mut()[s * k * p..(s + 1) * k * p].copy_from_slice(&wt);
        attention.data_mut()[s * k * p..(s + 1) * k * p].copy_from_slice(&a);
        output.data_mut()[s * o * p..(s + 1) * o * p].copy_from_slice(&out);
        regions.push(r);
        queries.push(q);
        keys.push(kk);
        values.push(v);
        context.push(ctx);
    }
    Ok(OcrTrace {
        features: features.clone(),
        region_weights: weights,
        regions,
        queries,
        keys,
        values,
        attention,
        context,
        output,
    })
}

pub fn ocr_block_backward(trace: &OcrTrace, params: &OcrBlockParams, d_out: &Tensor) -> OcrGrads {
    let (b, c, h, w) = trace.features.dims4();
    let k = trace.region_weights.dims4().1;
    let o = params.out_channels;
    let p = h * w;
    let scale = 1.0 / (o as f64).sqrt();
    let mut g = OcrBlockParams::zeros(params.stage_id, c, o);
    let mut d_features = Tensor::zeros(&[b, c, h, w]);
    let mut d_logits = Tensor::zeros(&[b, k, h, w]);
    for s in 0..b {
        let f = trace.features.sample(s);
        let wt = trace.region_weights.sample(s);
        let a = trace.attention.sample(s);
        let (r, q, kk, v) = (&trace.regions[s], &trace.queries[s], &trace.keys[s], &trace.values[s]);
        let dout = d_out.sample(s);

        let mut x = f.to_vec();
        x.extend_from_slice(&trace.context[s]);
        add_into(&mut g.wo, &mm(dout, false, &x, true, o, p, c + o));
        for j in 0..o {
            g.bo[j] += dout[j * p..(j + 1) * p].iter().sum::<f64>();
        }
        let dx = mm(&params.wo, true, dout, false, c + o, o, p);
        let (df_direct, dctx) = dx.split_at(c * p);
        let mut df = df_direct.to_vec();

        let da = mm(v, false, dctx, false, k, o, p);
        let dv = mm(a, false, dctx, true, k, p, o);
        let mut ds = vec![0.0; k * p];
        for col in 0..p {
            let dot: f64 = (0..k).map(|r| a[r * p + col] * da[r * p + col]).sum();
            for row in 0..k {
                let i = row * p + col;
                ds[i] = a[i] * (da[i] - dot) * scale;
            }
        }
        let dq = mm(kk, true, &ds, false, o, k, p);
        let dkk = mm(&ds, false, q, true, k, p, o);
        add_into(&mut g.wq, &mm(&dq, false, f, true, o, p, c));
        add_into(&mut df, &mm(&params.wq, true, &dq, false, c, o, p));
        add_into(&mut g.wk, &mm(&dkk, true, r, false, o, k, c));
        add_into(&mut g.wv, &mm(&dv, true, r, false, o, k, c));
        let mut dr = mm(&dkk, false, &params.wk, false, k, o, c);
        add_into(&mut dr, &mm(&dv, false, &params.wv, false, k, o, c));
        let dwt = mm(&dr, false, f, false, k, c, p);
        add_into(&mut df, &mm(&dr, true, wt, false, c, k, p));

        let dl = &mut d_logits.data_mut()[s * k * p..(s + 1) * k * p];
        for row in 0..k {
            let range = row * p..(row + 1) * p;
            let dot: f64 = wt[range.clone()].iter().zip(&dwt[range.clone()]).map(|(a, b)| a * b).sum();
            for i in range {
                dl[i] = wt[i] * (dwt[i] - dot);
            }
        }
        d_features.data_mut()[s * c * p..(s + 1) * c * p].copy_from_slice(&df);
    }
    OcrGrads {
        d_features,
        d_logits,
        params: g,
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    /// Project `[final ∥ enhanced...]` with a 1×1 convolution.
    #[default]
    Concat,
    /// Add a 1×1 projection of `[enhanced...]` to the final features.
    Add,
}

/// Channel widths of the OCR blocks and the fused output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusePlan {
    pub base_channels: usize,
    pub scale: f64,
    /// Output width of the block after each intermediate stage, shallowest first.
    pub stage_channels: Vec<usize>,
    pub final_channels: usize,
    #[serde(default)]
    pub mode: FuseMode,
}

/// Halves the width per step toward shallower stages, then applies `scale`.
pub fn build_fuse_plan(base_channels: usize, num_intermediate: usize, scale: f64) -> Result<FusePlan> {
    if base_channels < 2 {
        return Err(Error::InvalidArgument(format!("base channels {base_channels} < 2")));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("channel scale {scale} outside (0, 1]")));
    }
    let scaled = |c: usize| ((c as f64 * scale).floor() as usize).max(1);
    let stage_channels = (0..num_intermediate)
        .map(|i| {
            let shift = (num_intermediate - i) as u32;
            let halved = base_channels.checked_shr(shift).unwrap_or(0).max(1);
            scaled(halved)
        })
        .collect();
    Ok(FusePlan {
        base_channels,
        scale,
        stage_channels,
        final_channels: scaled(base_channels),
        mode: FuseMode::Concat,
    })
}

impl FusePlan {
    pub fn with_mode(mut self, mode: FuseMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn num_intermediate(&self) -> usize {
        self.stage_channels.len()
    }

    /// Width of the features the final head sees after fusion.
    pub fn output_channels(&self, final_stage_channels: usize) -> usize {
        match self.mode {
            FuseMode::Concat => self.final_channels,
            FuseMode::Add => final_stage_channels,
        }
    }

    /// Scalars added by attaching this plan to a network with the given stage
    /// widths and final class count.
    pub fn added_params(&self, stage_widths: &[usize], num_classes: usize) -> usize {
        let n = self.stage_channels.len();
        let c_last = stage_widths[n];
        let blocks: usize = (0..n).map(|i| block_param_count(stage_widths[i], self.stage_channels[i])).sum();
        let enhanced: usize = self.stage_channels.iter().sum();
        match self.mode {
            FuseMode::Concat => {
                let cf = self.final_channels;
                blocks + cf * (c_last + enhanced) + cf + num_classes * cf - num_classes * c_last
            }
            FuseMode::Add => blocks + c_last * enhanced + c_last,
        }
    }
}

/// Cached inputs of [`fuse`] for the backward pass.
#[derive(Clone, Debug)]
pub struct FuseTrace {
    input: Tensor,
    enhanced_dims: Vec<(usize, usize, usize)>,
}

/// Resamples every enhanced map to the final grid, stacks them with the final
/// features and applies the 1×1 projection `weight`/`bias`.
pub fn fuse(
    enhanced: &[Tensor],
    final_features: &Tensor,
    weight: &[f64],
    bias: &[f64],
    mode: FuseMode,
) -> Result<(Tensor, FuseTrace)> {
    if enhanced.is_empty() {
        return Err(Error::InvalidArgument("fusion needs at least one enhanced map".into()));
    }
    let (b, c_last, h, w) = final_features.dims4();
    let mut resized = Vec::with_capacity(enhanced.len());
    let mut dims = Vec::with_capacity(enhanced.len());
    for e in enhanced {
        let (eb, ec, eh, ew) = e.dims4();
        if eb != b {
            return Err(Error::Shape(format!("enhanced batch {eb} vs final batch {b}")));
        }
        let compatible = (eh >= h && eh % h == 0 && ew % w == 0 && eh / h == ew / w)
            || (eh < h && h % eh == 0 && w % ew == 0 && h / eh == w / ew);
        if !compatible {
            return Err(Error::Shape(format!("cannot resample {eh}x{ew} to {h}x{w}")));
        }
        dims.push((ec, eh, ew));
        resized.push(resize(e, h, w));
    }
    let mut parts: Vec<&Tensor> = Vec::with_capacity(enhanced.len() + 1);
    if mode == FuseMode::Concat {
        parts.push(final_features);
    }
    parts.extend(resized.iter());
    let input = concat_channels(&parts);
    let c_in = input.dims4().1;
    let c_out = bias.len();
    if weight.len() != c_out * c_in {
        return Err(Error::Shape(format!("fusion weight {} vs {c_out}x{c_in}", weight.len())));
    }
    let mut out = conv2d(&input, weight, bias, c_out, 1);
    if mode == FuseMode::Add {
        if c_out != c_last {
            return Err(Error::Shape(format!("additive fusion outputs {c_out} channels, final has {c_last}")));
        }
        out.add_assign(final_features);
    }
    Ok((
        out,
        FuseTrace {
            input,
            enhanced_dims: dims,
        },
    ))
}

pub struct FuseGrads {
    pub d_final: Tensor,
    pub d_enhanced: Vec<Tensor>,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

pub fn fuse_backward(trace: &FuseTrace, weight: &[f64], mode: FuseMode, d_out: &Tensor) -> FuseGrads {
    let (dx, d_weight, d_bias) = conv2d_backward(&trace.input, weight, d_out, 1, true);
    let mut sizes: Vec<usize> = Vec::new();
    let c_total = trace.input.dims4().1;
    let enhanced_total: usize = trace.enhanced_dims.iter().map(|d| d.0).sum();
    if mode == FuseMode::Concat {
        sizes.push(c_total - enhanced_total);
    }
    sizes.extend(trace.enhanced_dims.iter().map(|d| d.0));
    let mut parts = split_channels(&dx, &sizes).into_iter();
    let d_final = match mode {
        FuseMode::Concat => parts.next().expect("final block"),
        FuseMode::Add => d_out.clone(),
    };
    let d_enhanced = parts
        .zip(&trace.enhanced_dims)
        .map(|(d, &(_, eh, ew))| resize_backward(&d, eh, ew))
        .collect();
    FuseGrads {
        d_final,
        d_enhanced,
        d_weight,
        d_bias,
    }
}

/// Inserts an OCR block after every intermediate head and routes the fused
/// features into the final head, which is re-created when its input width changes.
pub fn attach_fuse(net: Network, plan: FusePlan, seed: u64) -> Result<Network> {
    net.with_fuse(plan, seed)
}

/// Removes the fusion path again.
pub fn detach_fuse(net: Network, seed: u64) -> Result<Network> {
    net.without_fuse(seed)
}
