//! MLP anchor predictor with learnable positional embeddings.
//!
//! A patch is flattened channel-major, the positional embedding is added,
//! and an MLP with ReLU hidden layers emits `K x 5` logits per patch:
//! `(t_cx, t_cy, t_w, t_h, t_score)`. Logits are decoded as
//!
//! - `cx = extent.x1 + extent.w * sigmoid(t_cx)`, clamped into the footprint (same for `cy`)
//! - `w = sigmoid(t_w)`, `h = sigmoid(t_h)` relative to the full image
//! - `score = sigmoid(t_score)`
//!
//! where `extent` is the full patch window and `footprint` its in-image part.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::featpyr::Patch;
use crate::geometry::BBox;
use crate::rng::SplitMix64;
use crate::tensorfile::{self, Tensor, TensorSet};

pub const LOGITS_PER_ANCHOR: usize = 5;

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (x, y) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = 0.0f32;
    for k in chunks * 8..a.len() {
        s += a[k] * b[k];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + s
}

#[inline]
fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Fully connected layer; `weight[i * out_dim + o]` maps input `i` to output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(&mut y, xi, &self.weight[i * self.out_dim..(i + 1) * self.out_dim]);
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub patch_size: usize,
    pub channels: usize,
    /// Anchors per patch.
    pub anchors: usize,
    pub pos_embed: Vec<f32>,
    pub layers: Vec<Dense>,
    /// Bumped on every parameter update; forward caches remember it.
    pub generation: u64,
}

impl PredictorParams {
    pub fn zeros(patch_size: usize, channels: usize, hidden: &[usize], anchors: usize) -> Self {
        let input = patch_size * patch_size * channels;
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(anchors * LOGITS_PER_ANCHOR);
        Self {
            patch_size,
            channels,
            anchors,
            pos_embed: vec![0.0; input],
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
            generation: 0,
        }
    }

    /// He-uniform hidden weights (`bound = sqrt(6 / fan_in)`), output head
    /// scaled by [`HEAD_GAIN`], zero biases and embeddings, and the score
    /// bias at `logit(0.1)`.
    pub fn init(
        rng: &mut SplitMix64,
        patch_size: usize,
        channels: usize,
        hidden: &[usize],
        anchors: usize,
    ) -> Self {
        let mut p = Self::zeros(patch_size, channels, hidden, anchors);
        let n = p.layers.len();
        for (li, layer) in p.layers.iter_mut().enumerate() {
            let gain = if li + 1 == n { HEAD_GAIN } else { 1.0 };
            let bound = he_bound(layer.in_dim) * gain;
            for w in layer.weight.iter_mut() {
                *w = rng.uniform(-bound, bound);
            }
        }
        let head = p.layers.last_mut().expect("at least one layer");
        for k in 0..anchors {
            head.bias[k * LOGITS_PER_ANCHOR + 4] = logit(0.1);
        }
        p
    }

    pub fn input_len(&self) -> usize {
        self.pos_embed.len()
    }

    pub fn zeros_like(&self) -> Self {
        let hidden: Vec<usize> = self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim)
            .collect();
        Self::zeros(self.patch_size, self.channels, &hidden, self.anchors)
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| (l.in_dim * l.out_dim) as u64).sum()
    }

    /// Parameter slices in canonical order: embedding, then weight/bias per layer.
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![&self.pos_embed];
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![&mut self.pos_embed];
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut out = vec![Tensor::new(
            format!("{prefix}.pos_embed"),
            vec![self.pos_embed.len()],
            self.pos_embed.clone(),
        )];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Tensor::new(
                format!("{prefix}.layer{i}.weight"),
                vec![l.in_dim, l.out_dim],
                l.weight.clone(),
            ));
            out.push(Tensor::new(
                format!("{prefix}.layer{i}.bias"),
                vec![l.out_dim],
                l.bias.clone(),
            ));
        }
        out
    }

    fn load(&mut self, prefix: &str, set: &mut TensorSet) -> Result<()> {
        self.pos_embed = set.take(&format!("{prefix}.pos_embed"), &[self.pos_embed.len()])?;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.weight = set.take(&format!("{prefix}.layer{i}.weight"), &[l.in_dim, l.out_dim])?;
            l.bias = set.take(&format!("{prefix}.layer{i}.bias"), &[l.out_dim])?;
        }
        Ok(())
    }
}

/// Output-layer scale relative to He init, so initial scores sit near 0.1.
pub const HEAD_GAIN: f32 = 0.1;

pub fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

/// One decoded anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorOut {
    pub bbox: BBox,
    pub score: f32,
    pub logits: [f32; 5],
    /// d(cx, cy, w, h) / d(t_cx, t_cy, t_w, t_h); zero where a clamp is active.
    pub dbox_dlogit: [f32; 4],
}

impl AnchorOut {
    /// Gradient w.r.t. the five logits from gradients w.r.t. the box and the score logit.
    pub fn chain(&self, d_box: [f32; 4], d_score_logit: f32) -> [f32; 5] {
        [
            d_box[0] * self.dbox_dlogit[0],
            d_box[1] * self.dbox_dlogit[1],
            d_box[2] * self.dbox_dlogit[2],
            d_box[3] * self.dbox_dlogit[3],
            d_score_logit,
        ]
    }
}

/// Activations retained by [`predict`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Patch plus positional embedding.
    input: Vec<f32>,
    /// Post-ReLU hidden activations, one per hidden layer.
    hidden: Vec<Vec<f32>>,
    out_len: usize,
}

pub fn decode_anchor(logits: [f32; 5], extent: &BBox, footprint: &BBox) -> AnchorOut {
    let [ex1, ey1, _, _] = extent.corners();
    let [fx1, fy1, fx2, fy2] = footprint.corners();
    let s: [f32; 5] = logits.map(sigmoid);
    let raw_cx = ex1 + extent.w * s[0];
    let raw_cy = ey1 + extent.h * s[1];
    let cx = raw_cx.clamp(fx1, fx2);
    let cy = raw_cy.clamp(fy1, fy2);
    let dcx = if cx == raw_cx { extent.w * s[0] * (1.0 - s[0]) } else { 0.0 };
    let dcy = if cy == raw_cy { extent.h * s[1] * (1.0 - s[1]) } else { 0.0 };
    AnchorOut {
        bbox: BBox::new(cx, cy, s[2], s[3]),
        score: s[4],
        logits,
        dbox_dlogit: [dcx, dcy, s[2] * (1.0 - s[2]), s[3] * (1.0 - s[3])],
    }
}

fn check_patch(params: &PredictorParams, patch: &Patch) -> Result<()> {
    if patch.size != params.patch_size
        || patch.channels != params.channels
        || patch.values.len() != params.input_len()
    {
        return Err(Error::Shape(format!(
            "patch {}x{}x{} does not fit predictor {}x{}x{}",
            patch.channels,
            patch.size,
            patch.size,
            params.channels,
            params.patch_size,
            params.patch_size
        )));
    }
    Ok(())
}

/// Raw head outputs (`K * 5`) and the cache for [`predict_backward`].
pub fn forward_logits(params: &PredictorParams, values: &[f32]) -> Result<(Vec<f32>, ForwardCache)> {
    if values.len() != params.input_len() {
        return Err(Error::Shape(format!(
            "input has {} values, predictor expects {}",
            values.len(),
            params.input_len()
        )));
    }
    let input: Vec<f32> = values
        .iter()
        .zip(&params.pos_embed)
        .map(|(v, p)| v + p)
        .collect();
    let mut hidden = Vec::with_capacity(params.layers.len() - 1);
    let mut x = input.clone();
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut y = layer.forward(&x);
        if li < last {
            for v in y.iter_mut() {
                *v = v.max(0.0);
            }
            hidden.push(y.clone());
        }
        x = y;
    }
    let out_len = x.len();
    Ok((
        x,
        ForwardCache {
            generation: params.generation,
            out_len,
            input,
            hidden,
        },
    ))
}

/// Run the predictor on a patch: `K` decoded anchors plus the forward cache.
pub fn predict(params: &PredictorParams, patch: &Patch) -> Result<(Vec<AnchorOut>, ForwardCache)> {
    check_patch(params, patch)?;
    let (out, cache) = forward_logits(params, &patch.values)?;
    let anchors = out
        .chunks_exact(LOGITS_PER_ANCHOR)
        .map(|c| decode_anchor([c[0], c[1], c[2], c[3], c[4]], &patch.extent, &patch.footprint))
        .collect();
    Ok((anchors, cache))
}

/// Reverse-mode pass. Adds parameter gradients into `grads` and returns the
/// gradient w.r.t. the patch values.
pub fn predict_backward_into(
    params: &PredictorParams,
    cache: &ForwardCache,
    grad_logits: &[f32],
    grads: &mut PredictorParams,
) -> Result<Vec<f32>> {
    if cache.generation != params.generation {
        return Err(Error::StaleCache(format!(
            "cache from generation {}, parameters at {}",
            cache.generation, params.generation
        )));
    }
    let head = params.layers.last().expect("layers");
    if grad_logits.len() != head.out_dim
        || cache.out_len != head.out_dim
        || cache.hidden.iter().zip(&params.layers).any(|(h, l)| h.len() != l.out_dim)
        || cache.input.len() != params.input_len()
        || cache.hidden.len() + 1 != params.layers.len()
        || grads.layers.len() != params.layers.len()
    {
        return Err(Error::StaleCache("cache or gradient shapes do not match".into()));
    }
    let mut dy = grad_logits.to_vec();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let g = &mut grads.layers[li];
        let x: &[f32] = if li == 0 { &cache.input } else { &cache.hidden[li - 1] };
        for (gb, d) in g.bias.iter_mut().zip(&dy) {
            *gb += d;
        }
        let mut dx = vec![0.0f32; layer.in_dim];
        let od = layer.out_dim;
        for (i, &xi) in x.iter().enumerate() {
            let row = i * od..(i + 1) * od;
            if xi != 0.0 {
                axpy(&mut g.weight[row.clone()], xi, &dy);
            }
            // Post-ReLU zero means the unit was inactive; the input layer has no ReLU.
            if li == 0 || xi > 0.0 {
                dx[i] = dot(&layer.weight[row], &dy);
            }
        }
        dy = dx;
    }
    for (g, d) in grads.pos_embed.iter_mut().zip(&dy) {
        *g += d;
    }
    Ok(dy)
}

/// Parameter gradients and patch-value gradients for one forward call.
pub fn predict_backward(
    params: &PredictorParams,
    cache: &ForwardCache,
    grad_logits: &[f32],
) -> Result<(PredictorParams, Vec<f32>)> {
    let mut grads = params.zeros_like();
    let dpatch = predict_backward_into(params, cache, grad_logits, &mut grads)?;
    Ok((grads, dpatch))
}

/// Which predictor handles a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorSlot {
    P5,
    P6,
    Adaptive,
}

impl PredictorSlot {
    pub fn for_level(level: u8) -> Self {
        match level {
            6 => PredictorSlot::P6,
            5 => PredictorSlot::P5,
            _ => PredictorSlot::Adaptive,
        }
    }
}

/// All learnable state of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorBank {
    pub model: ModelConfig,
    pub p5: PredictorParams,
    pub p6: PredictorParams,
    /// Shared by every probed level.
    pub adaptive: PredictorParams,
    /// Channel projection, `raw_channels x channels`.
    pub proj_weight: Vec<f32>,
    pub proj_bias: Vec<f32>,
}

const WEIGHTS_KIND: &str = "weights";

impl PredictorBank {
    pub fn zeros(model: &ModelConfig) -> Self {
        let p = |k| PredictorParams::zeros(model.patch_size, model.channels, &model.hidden, k);
        Self {
            model: model.clone(),
            p5: p(model.k_fixed),
            p6: p(model.k_fixed),
            adaptive: p(model.k_adapt),
            proj_weight: vec![0.0; model.raw_channels * model.channels],
            proj_bias: vec![0.0; model.channels],
        }
    }

    pub fn init(model: &ModelConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut p = |k| {
            let mut r = rng.split();
            PredictorParams::init(&mut r, model.patch_size, model.channels, &model.hidden, k)
        };
        let p5 = p(model.k_fixed);
        let p6 = p(model.k_fixed);
        let adaptive = p(model.k_adapt);
        let mut r = rng.split();
        let bound = he_bound(model.raw_channels);
        let proj_weight = (0..model.raw_channels * model.channels)
            .map(|_| r.uniform(-bound, bound))
            .collect();
        Self {
            model: model.clone(),
            p5,
            p6,
            adaptive,
            proj_weight,
            proj_bias: vec![0.0; model.channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.model)
    }

    pub fn params(&self, slot: PredictorSlot) -> &PredictorParams {
        match slot {
            PredictorSlot::P5 => &self.p5,
            PredictorSlot::P6 if self.model.share_p6_with_p5 => &self.p5,
            PredictorSlot::P6 => &self.p6,
            PredictorSlot::Adaptive => &self.adaptive,
        }
    }

    pub fn params_mut(&mut self, slot: PredictorSlot) -> &mut PredictorParams {
        match slot {
            PredictorSlot::P5 => &mut self.p5,
            PredictorSlot::P6 if self.model.share_p6_with_p5 => &mut self.p5,
            PredictorSlot::P6 => &mut self.p6,
            PredictorSlot::Adaptive => &mut self.adaptive,
        }
    }

    pub fn slices(&self) -> Vec<&[f32]> {
        let mut v = self.p5.slices();
        v.extend(self.p6.slices());
        v.extend(self.adaptive.slices());
        v.push(&self.proj_weight);
        v.push(&self.proj_bias);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.p5.slices_mut();
        v.extend(self.p6.slices_mut());
        v.extend(self.adaptive.slices_mut());
        v.push(&mut self.proj_weight);
        v.push(&mut self.proj_bias);
        v
    }

    /// Mark all parameter sets as updated, invalidating outstanding caches.
    pub fn bump_generation(&mut self) {
        self.p5.generation += 1;
        self.p6.generation += 1;
        self.adaptive.generation += 1;
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut t = self.p5.tensors("p5");
        t.extend(self.p6.tensors("p6"));
        t.extend(self.adaptive.tensors("adaptive"));
        t.push(Tensor::new(
            "proj.weight",
            vec![self.model.raw_channels, self.model.channels],
            self.proj_weight.clone(),
        ));
        t.push(Tensor::new("proj.bias", vec![self.model.channels], self.proj_bias.clone()));
        t
    }

    pub fn from_tensors(model: &ModelConfig, set: &mut TensorSet) -> Result<Self> {
        let mut bank = Self::zeros(model);
        bank.p5.load("p5", set)?;
        bank.p6.load("p6", set)?;
        bank.adaptive.load("adaptive", set)?;
        bank.proj_weight = set.take("proj.weight", &[model.raw_channels, model.channels])?;
        bank.proj_bias = set.take("proj.bias", &[model.channels])?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.model });
        tensorfile::write(path, WEIGHTS_KIND, meta, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = tensorfile::read(path, WEIGHTS_KIND)?;
        let model: ModelConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|e| Error::format(path, format!("model config: {e}")))?;
        Self::from_tensors(&model, &mut TensorSet::new(tensors))
    }
}
