use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool, avg_pool_backward, conv2d, conv2d_backward, relu, relu_backward};
use super::layers::{upsample_nearest, upsample_nearest_backward};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::ocrfuse::{self, FuseMode, FusePlan, FuseTrace, OcrBlockParams, OcrTrace};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Stage layout of the trunk and the class count of every head. The last
/// stage is the final one; its head predicts the full class set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub downsample: Vec<usize>,
    pub head_classes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkConfig {
    /// Three stages of 3×3 conv, 2× pooling and widths 8, 16, 32.
    pub fn reference(height: usize, width: usize, stage_classes: &[usize], num_classes: usize) -> Self {
        let mut head_classes = stage_classes.to_vec();
        head_classes.push(num_classes);
        let n = head_classes.len();
        let channels = [8, 16, 32];
        Self {
            input_channels: 3,
            height,
            width,
            channels: (0..n).map(|i| channels[i.min(2)] << i.saturating_sub(2)).collect(),
            kernel_sizes: vec![3; n],
            downsample: vec![2; n],
            head_classes,
            activation: Activation::Relu,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn num_classes(&self) -> usize {
        *self.head_classes.last().expect("validated config has a final head")
    }

    /// Same trunk, intermediate heads sized for `classes`.
    pub fn with_stage_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut cfg = self.clone();
        let n = self.num_stages() - 1;
        if classes.len() != n {
            return Err(Error::InvalidArgument(format!("{} head sizes for {n} intermediate stages", classes.len())));
        }
        cfg.head_classes[..n].copy_from_slice(classes);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial size of the features leaving stage `i` (0-based).
    pub fn stage_dims(&self, i: usize) -> (usize, usize) {
        let f: usize = self.downsample[..=i].iter().product();
        (self.height / f, self.width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.channels.len();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if s < 2 {
            return bad("network needs at least one intermediate stage".into());
        }
        if self.kernel_sizes.len() != s || self.downsample.len() != s || self.head_classes.len() != s {
            return bad(format!(
                "per-stage lists disagree: {} channels, {} kernels, {} factors, {} heads",
                s,
                self.kernel_sizes.len(),
                self.downsample.len(),
                self.head_classes.len()
            ));
        }
        if self.input_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("stage widths {:?} decrease", self.channels));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} is not odd"));
        }
        if self.downsample.contains(&0) {
            return bad("downsample factors must be positive".into());
        }
        if let Some(c) = self.head_classes.iter().find(|&&c| c < 2) {
            return bad(format!("head with {c} classes"));
        }
        let total: usize = self.downsample.iter().product();
        if self.height == 0 || self.width == 0 || self.height % total != 0 || self.width % total != 0 {
            return bad(format!("{}x{} is not divisible by {total}", self.height, self.width));
        }
        Ok(())
    }
}

/// Logits of every head at label resolution and the feature map leaving every stage.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub logits: Vec<Tensor>,
    pub features: Vec<Tensor>,
}

impl StageOutputs {
    pub fn final_logits(&self) -> &Tensor {
        self.logits.last().expect("at least one head")
    }
}

/// Activations kept from a forward pass for [`Network::backward`].
pub struct ForwardTrace {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    features: Vec<Tensor>,
    final_input: Option<Tensor>,
    ocr: Vec<OcrTrace>,
    fuse: Option<FuseTrace>,
}

impl ForwardTrace {
    /// Pre-activations of every stage, used to locate ReLU kinks.
    pub fn pre_activations(&self) -> &[Tensor] {
        &self.pre
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    fuse: Option<FusePlan>,
    params: ParamStore,
}

fn stage_w(i: usize) -> String {
    format!("stage{}.weight", i + 1)
}
fn stage_b(i: usize) -> String {
    format!("stage{}.bias", i + 1)
}
fn head_w(i: usize) -> String {
    format!("head{}.weight", i + 1)
}
fn head_b(i: usize) -> String {
    format!("head{}.bias", i + 1)
}
const OCR_FIELDS: [&str; 5] = ["wq", "wk", "wv", "wo", "bo"];

fn uniform(seed: u64, name: &str, n: usize, bound: f64) -> Vec<f64> {
    let mut r = rng::named(seed, &format!("init.{name}"));
    (0..n).map(|_| r.random_range(-bound..bound)).collect()
}

impl Network {
    /// Fresh parameters: trunk weights uniform in ±√(6/fan_in), head weights
    /// in ±1/√fan_in, biases zero. Every tensor draws from its own stream.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut c_in = config.input_channels;
        for i in 0..config.num_stages() {
            let (c, k) = (config.channels[i], config.kernel_sizes[i]);
            let fan_in = c_in * k * k;
            let w = uniform(seed, &stage_w(i), c * fan_in, (6.0 / fan_in as f64).sqrt());
            params.push(stage_w(i), &[c, c_in, k, k], w)?;
            params.push(stage_b(i), &[c], vec![0.0; c])?;
            c_in = c;
        }
        let mut net = Self {
            config,
            fuse: None,
            params,
        };
        for i in 0..net.config.num_stages() {
            net.init_head(i, net.config.channels[i], seed)?;
        }
        Ok(net)
    }

    fn init_head(&mut self, i: usize, c_in: usize, seed: u64) -> Result<()> {
        self.params.remove(&head_w(i));
        self.params.remove(&head_b(i));
        let k = self.config.head_classes[i];
        let w = uniform(seed, &head_w(i), k * c_in, 1.0 / (c_in as f64).sqrt());
        self.params.push(head_w(i), &[k, c_in, 1, 1], w)?;
        self.params.push(head_b(i), &[k], vec![0.0; k])?;
        Ok(())
    }

    /// Reassembles a network from stored parameters, checking every shape.
    pub fn from_parts(config: NetworkConfig, fuse: Option<FusePlan>, params: ParamStore) -> Result<Self> {
        let mut template = Network::new(config, 0)?;
        if let Some(plan) = fuse {
            template = template.with_fuse(plan, 0)?;
        }
        if template.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, expected {}",
                params.len(),
                template.params.len()
            )));
        }
        for (want, got) in template.params.params().iter().zip(params.params()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?}, expected `{}` {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        template.params = params;
        Ok(template)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn fuse_plan(&self) -> Option<&FusePlan> {
        self.fuse.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Rows of a head's 1×1 weight, one vector per output class.
    pub fn head_rows(&self, stage: usize) -> Vec<Vec<f64>> {
        let w = self.params.get(&head_w(stage));
        let k = self.config.head_classes[stage];
        w.chunks(w.len() / k).map(|r| r.to_vec()).collect()
    }

    /// Copies every parameter whose name and shape match `other`.
    pub fn copy_matching(&mut self, other: &Network) -> usize {
        let mut copied = 0;
        for p in self.params.params_mut() {
            if let Some(i) = other.params.index(&p.name) {
                let q = &other.params.params()[i];
                if q.shape == p.shape {
                    p.value.clone_from(&q.value);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub(crate) fn with_fuse(mut self, plan: FusePlan, seed: u64) -> Result<Self> {
        let s = self.config.num_stages();
        if self.fuse.is_some() {
            return Err(Error::InvalidArgument("fusion is already attached".into()));
        }
        if plan.num_intermediate() != s - 1 {
            return Err(Error::InvalidArgument(format!(
                "fuse plan has {} stages, network has {} intermediate stages",
                plan.num_intermediate(),
                s - 1
            )));
        }
        for (i, &o) in plan.stage_channels.iter().enumerate() {
            let block = OcrBlockParams::init(i + 1, self.config.channels[i], o, seed);
            self.store_ocr(&block)?;
        }
        let c_last = self.config.channels[s - 1];
        let enhanced: usize = plan.stage_channels.iter().sum();
        let c_out = plan.output_channels(c_last);
        let c_in = match plan.mode {
            FuseMode::Concat => c_last + enhanced,
            FuseMode::Add => enhanced,
        };
        let bound = 1.0 / (c_in as f64).sqrt();
        let mut w = uniform(seed, "fuse.weight", c_out * c_in, bound);
        if plan.mode == FuseMode::Concat {
            for o in 0..c_out {
                for i in 0..c_last {
                    w[o * c_in + i] = if o == i { 1.0 } else { 0.0 };
                }
            }
        }
        self.params.push("fuse.weight", &[c_out, c_in, 1, 1], w)?;
        self.params.push("fuse.bias", &[c_out], vec![0.0; c_out])?;
        if c_out != c_last {
            self.init_head(s - 1, c_out, seed)?;
        }
        self.fuse = Some(plan);
        Ok(self)
    }

    pub(crate) fn without_fuse(mut self, seed: u64) -> Result<Self> {
        let Some(plan) = self.fuse.take() else {
            return Ok(self);
        };
        self.params.remove_prefix("ocr");
        self.params.remove_prefix("fuse.");
        let s = self.config.num_stages();
        let c_last = self.config.channels[s - 1];
        if plan.output_channels(c_last) != c_last {
            self.init_head(s - 1, c_last, seed)?;
        }
        Ok(self)
    }

    /// Sets the fusion projection so the fused features equal the final-stage
    /// features: identity on that block, zero on the enhanced maps.
    pub fn set_fusion_pass_through(&mut self) -> Result<()> {
        let plan = self.fuse.clone().ok_or_else(|| Error::InvalidArgument("no fusion attached".into()))?;
        let c_last = *self.config.channels.last().expect("stages");
        if plan.output_channels(c_last) != c_last {
            return Err(Error::InvalidArgument("pass-through needs the fused width to match the final stage".into()));
        }
        let w = self.params.get_mut("fuse.weight");
        let c_in = w.len() / c_last;
        for o in 0..c_last {
            for i in 0..c_in {
                w[o * c_in + i] = if plan.mode == FuseMode::Concat && o == i { 1.0 } else { 0.0 };
            }
        }
        self.params.get_mut("fuse.bias").fill(0.0);
        Ok(())
    }

    fn store_ocr(&mut self, b: &OcrBlockParams) -> Result<()> {
        let (c, o) = (b.in_channels, b.out_channels);
        let shapes: [(&Vec<f64>, Vec<usize>); 5] = [
            (&b.wq, vec![o, c]),
            (&b.wk, vec![o, c]),
            (&b.wv, vec![o, c]),
            (&b.wo, vec![o, c + o]),
            (&b.bo, vec![o]),
        ];
        for (field, (v, shape)) in OCR_FIELDS.iter().zip(shapes) {
            self.params.push(format!("ocr{}.{field}", b.stage_id), &shape, v.clone())?;
        }
        Ok(())
    }

    fn ocr_block(&self, i: usize) -> OcrBlockParams {
        let plan = self.fuse.as_ref().expect("fusion attached");
        let id = i + 1;
        let get = |f: &str| self.params.get(&format!("ocr{id}.{f}")).to_vec();
        OcrBlockParams {
            stage_id: id,
            in_channels: self.config.channels[i],
            out_channels: plan.stage_channels[i],
            wq: get("wq"),
            wk: get("wk"),
            wv: get("wv"),
            wo: get("wo"),
            bo: get("bo"),
        }
    }

    pub fn forward(&self, images: &Tensor) -> Result<StageOutputs> {
        Ok(self.forward_traced(images)?.0)
    }

    pub fn forward_traced(&self, images: &Tensor) -> Result<(StageOutputs, ForwardTrace)> {
        let cfg = &self.config;
        let (_, c, h, w) = images.dims4();
        if (c, h, w) != (cfg.input_channels, cfg.height, cfg.width) {
            return Err(Error::Shape(format!(
                "input {:?}, network expects {}x{}x{}",
                images.shape(),
                cfg.input_channels,
                cfg.height,
                cfg.width
            )));
        }
        let s = cfg.num_stages();
        let mut inputs = Vec::with_capacity(s);
        let mut pre = Vec::with_capacity(s);
        let mut features: Vec<Tensor> = Vec::with_capacity(s);
        for i in 0..s {
            let x = if i == 0 { images } else { &features[i - 1] };
            let z = conv2d(x, self.params.get(&stage_w(i)), self.params.get(&stage_b(i)), cfg.channels[i], cfg.kernel_sizes[i]);
            let r = match cfg.activation {
                Activation::Relu => relu(&z),
                Activation::Identity => z.clone(),
            };
            let a = if cfg.downsample[i] == 1 { r } else { avg_pool(&r, cfg.downsample[i]) };
            inputs.push(x.clone());
            pre.push(z);
            features.push(a);
        }
        let mut small: Vec<Tensor> = (0..s - 1).map(|i| self.head(i, &features[i])).collect();
        let mut ocr = Vec::new();
        let mut fuse_trace = None;
        let mut final_input = None;
        if let Some(plan) = &self.fuse {
            let mut enhanced = Vec::with_capacity(s - 1);
            for i in 0..s - 1 {
                let t = ocrfuse::ocr_block_trace(&features[i], &small[i], &self.ocr_block(i))?;
                enhanced.push(t.output.clone());
                ocr.push(t);
            }
            let (fused, trace) = ocrfuse::fuse(
                &enhanced,
                &features[s - 1],
                self.params.get("fuse.weight"),
                self.params.get("fuse.bias"),
                plan.mode,
            )?;
            small.push(self.head(s - 1, &fused));
            final_input = Some(fused);
            fuse_trace = Some(trace);
        } else {
            small.push(self.head(s - 1, &features[s - 1]));
        }
        let logits = small
            .iter()
            .map(|t| upsample_nearest(t, cfg.height / t.dims4().2))
            .collect();
        let outputs = StageOutputs {
            logits,
            features: features.clone(),
        };
        let trace = ForwardTrace {
            inputs,
            pre,
            features,
            final_input,
            ocr,
            fuse: fuse_trace,
        };
        Ok((outputs, trace))
    }

    fn head(&self, i: usize, x: &Tensor) -> Tensor {
        conv2d(x, self.params.get(&head_w(i)), self.params.get(&head_b(i)), self.config.head_classes[i], 1)
    }

    /// Parameter gradients given the loss gradient of each head's logits.
    /// Heads passed as `None` are skipped entirely; the final head is required.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[Option<Tensor>]) -> Result<Grads> {
        let cfg = &self.config;
        let s = cfg.num_stages();
        if d_logits.len() != s {
            return Err(Error::Shape(format!("{} logit gradients for {s} heads", d_logits.len())));
        }
        let mut grads = self.params.zero_grads();
        let mut d_small: Vec<Option<Tensor>> = d_logits
            .iter()
            .enumerate()
            .map(|(i, d)| {
                d.as_ref().map(|d| upsample_nearest_backward(d, cfg.height / cfg.stage_dims(i).0))
            })
            .collect();
        let d_final = d_small[s - 1]
            .take()
            .ok_or_else(|| Error::InvalidArgument("final head gradient is required".into()))?;
        let final_in = trace.final_input.as_ref().unwrap_or(&trace.features[s - 1]);
        let (d_final_in, dw, db) = conv2d_backward(final_in, self.params.get(&head_w(s - 1)), &d_final, 1, true);
        grads.accumulate(&head_w(s - 1), &dw);
        grads.accumulate(&head_b(s - 1), &db);

        let mut d_feat: Vec<Option<Tensor>> = vec![None; s];
        if let (Some(plan), Some(ft)) = (&self.fuse, &trace.fuse) {
            let fg = ocrfuse::fuse_backward(ft, self.params.get("fuse.weight"), plan.mode, &d_final_in);
            grads.accumulate("fuse.weight", &fg.d_weight);
            grads.accumulate("fuse.bias", &fg.d_bias);
            d_feat[s - 1] = Some(fg.d_final);
            for (i, d_e) in fg.d_enhanced.iter().enumerate() {
                let og = ocrfuse::ocr_block_backward(&trace.ocr[i], &self.ocr_block(i), d_e);
                let id = i + 1;
                for (field, g) in OCR_FIELDS.iter().zip([&og.params.wq, &og.params.wk, &og.params.wv, &og.params.wo, &og.params.bo]) {
                    grads.accumulate(&format!("ocr{id}.{field}"), g);
                }
                d_feat[i] = Some(og.d_features);
                d_small[i] = Some(match d_small[i].take() {
                    Some(mut d) => {
                        d.add_assign(&og.d_logits);
                        d
                    }
                    None => og.d_logits,
                });
            }
        } else {
            d_feat[s - 1] = Some(d_final_in);
        }

        for i in (0..s).rev() {
            if i < s - 1 {
                if let Some(d) = &d_small[i] {
                    let (dx, dw, db) = conv2d_backward(&trace.features[i], self.params.get(&head_w(i)), d, 1, true);
                    grads.accumulate(&head_w(i), &dw);
                    grads.accumulate(&head_b(i), &db);
                    add_opt(&mut d_feat[i], dx);
                }
            }
            let Some(d) = d_feat[i].take() else {
                continue;
            };
            let d = if cfg.downsample[i] == 1 { d } else { avg_pool_backward(&d, cfg.downsample[i]) };
            let d = match cfg.activation {
                Activation::Relu => relu_backward(&trace.pre[i], &d),
                Activation::Identity => d,
            };
            let (dx, dw, db) = conv2d_backward(&trace.inputs[i], self.params.get(&stage_w(i)), &d, cfg.kernel_sizes[i], i > 0);
            grads.accumulate(&stage_w(i), &dw);
            grads.accumulate(&stage_b(i), &db);
            if i > 0 {
                add_opt(&mut d_feat[i - 1], dx);
            }
        }
        Ok(grads)
    }
}

fn add_opt(slot: &mut Option<Tensor>, d: Tensor) {
    match slot {
        Some(t) => t.add_assign(&d),
        None => *slot = Some(d),
    }
}
