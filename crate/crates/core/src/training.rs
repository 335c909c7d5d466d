//! Optimization of the predictor bank and the channel projection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::{build_training_patches, hungarian, match_cost, patch_targets, Assignment, MatchCoeffs, TrainingMaps};
use crate::config::{GenConfig, LossConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::featpyr::{downsample2, interpolate_bilinear, FeatureMap, Patch, PatchKind};
use crate::generator::{generate_prepared, PreparedPyramid};
use crate::losses::{anchor_loss, LossBreakdown};
use crate::predictor::{predict, predict_backward_into, PredictorBank, PredictorSlot, LOGITS_PER_ANCHOR};
use crate::rng::SplitMix64;
use crate::synthdata::{Dataset, Scene};
use crate::tensorfile::{self, Tensor, TensorSet};

const CHECKPOINT_KIND: &str = "checkpoint";

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f32,
    pub l1: f64,
    pub giou: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,l1,giou,cls_pos,cls_neg,total,grad_norm";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.l1, self.giou, self.cls_pos, self.cls_neg, self.total, self.grad_norm
        )
    }
}

/// Loss and gradients of one scene.
#[derive(Debug, Clone)]
pub struct SceneGrads {
    /// Mean over the scene's training patches.
    pub breakdown: LossBreakdown,
    pub grads: PredictorBank,
    /// Predictor invocations per level, coarsest first.
    pub patches_per_level: Vec<(u8, usize)>,
}

/// Raw (uncompressed) maps aligned with the compressed training maps.
struct RawMaps {
    p6: FeatureMap,
    p5: FeatureMap,
}

fn raw_patch(map: &FeatureMap, patch: &Patch) -> (Vec<f32>, Vec<bool>) {
    let (fh, fv) = patch.kind.flips();
    let base_kind = if fh || fv { PatchKind::FixedP6 } else { patch.kind };
    let base = Patch::from_window(map, patch.origin, patch.size, base_kind);
    let mask = map.window_mask(patch.origin, patch.size);
    if fh || fv {
        (base.flipped(patch.kind).values, mask)
    } else {
        (base.values, mask)
    }
}

/// Add `d(loss)/d(projection)` for one patch given `d(loss)/d(patch values)`.
///
/// Interpolation, pooling, cropping and flips all commute with the per-cell
/// projection (their weights sum to one and padding is zero), so the
/// gradient only needs the raw window at the same position.
fn accumulate_projection(grads: &mut PredictorBank, raw: &[f32], mask: &[bool], dpatch: &[f32], c_in: usize, c_out: usize) {
    let n = mask.len();
    for o in 0..c_out {
        let d = &dpatch[o * n..(o + 1) * n];
        let mut db = 0.0f64;
        for (k, &m) in mask.iter().enumerate() {
            if m {
                db += d[k] as f64;
            }
        }
        grads.proj_bias[o] += db as f32;
        for ci in 0..c_in {
            let r = &raw[ci * n..(ci + 1) * n];
            let s: f64 = r.iter().zip(d).map(|(a, b)| *a as f64 * *b as f64).sum();
            grads.proj_weight[ci * c_out + o] += s as f32;
        }
    }
}

/// Forward the generator, compose the training patches, and backpropagate
/// the per-patch anchor loss into a fresh gradient bank.
pub fn scene_gradients(
    bank: &PredictorBank,
    scene: &Scene,
    gen: &GenConfig,
    loss: &LossConfig,
    n_tp: usize,
    seed: u64,
) -> Result<SceneGrads> {
    let pyr = &scene.pyramid;
    let gts = &scene.spec.boxes;
    let mut prepared = PreparedPyramid::new(pyr, bank, gen)?;
    let out = generate_prepared(&mut prepared, pyr, bank, gen, true)?;

    let raw5 = pyr.require(5)?;
    let raw_interp = interpolate_bilinear(raw5, gen.interp_size, gen.interp_size);
    let mut raw_p6 = downsample2(&raw_interp)?;
    raw_p6.level = 6;
    let raw = RawMaps { p6: raw_p6, p5: raw_interp };

    let probe_levels: Vec<u8> = (gen.lowest_level..=4).rev().collect();
    for &l in &probe_levels {
        prepared.probed(l, pyr, bank)?;
    }
    let probed: Vec<&FeatureMap> = probe_levels
        .iter()
        .filter_map(|&l| prepared.probed_ref(l))
        .collect();
    let maps = TrainingMaps {
        p6: &prepared.p6,
        p5: &prepared.interp,
        probed,
    };
    let levels = build_training_patches(&maps, &out.patches, gts, gen.patch_size, n_tp, seed)?;

    let mut grads = bank.zeros_like();
    let mut total = LossBreakdown::default();
    let coeffs = MatchCoeffs {
        l1: loss.lambda_l1,
        giou: loss.lambda_giou,
        score: loss.lambda_cls,
    };
    let n_patches: usize = levels.iter().map(|l| l.patches.len()).sum();
    let scale = 1.0 / n_patches as f64;
    let (c_in, c_out) = (bank.model.raw_channels, bank.model.channels);
    let mut counts = Vec::with_capacity(levels.len());
    for lp in &levels {
        let slot = PredictorSlot::for_level(lp.level);
        let params = bank.params(slot);
        let raw_map: &FeatureMap = match lp.level {
            6 => &raw.p6,
            5 => &raw.p5,
            l => pyr.require(l)?,
        };
        for (pi, patch) in lp.patches.iter().enumerate() {
            let (anchors, cache) = predict(params, patch)?;
            let targets = patch_targets(patch, gts);
            let assignment = if targets.is_empty() {
                Assignment::empty(anchors.len(), 0)
            } else {
                let boxes: Vec<_> = anchors.iter().map(|a| a.bbox).collect();
                let scores: Vec<f32> = anchors.iter().map(|a| a.score).collect();
                hungarian(&match_cost(&boxes, &scores, &targets, &coeffs))?
            };
            let al = anchor_loss(&anchors, &targets, &assignment, loss)?;
            if !al.breakdown.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {:?} on scene {} level P{} patch {pi}",
                    al.breakdown, scene.spec.id, lp.level
                )));
            }
            total.add_scaled(&al.breakdown, scale);
            let flat: Vec<f32> = al
                .grads
                .iter()
                .flat_map(|g| g.iter().map(|v| v * scale as f32))
                .collect();
            debug_assert_eq!(flat.len(), anchors.len() * LOGITS_PER_ANCHOR);
            let dpatch = predict_backward_into(params, &cache, &flat, grads.params_mut(slot))?;
            let (rv, mask) = raw_patch(raw_map, patch);
            accumulate_projection(&mut grads, &rv, &mask, &dpatch, c_in, c_out);
        }
        counts.push((lp.level, lp.patches.len()));
    }
    Ok(SceneGrads {
        breakdown: total,
        grads,
        patches_per_level: counts,
    })
}

fn global_norm(grads: &PredictorBank) -> f64 {
    grads
        .slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients to a global norm of at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut PredictorBank, max_norm: f32) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm as f64 {
        let k = (max_norm as f64 / (norm + 1e-12)) as f32;
        for s in grads.slices_mut() {
            for g in s.iter_mut() {
                *g *= k;
            }
        }
    }
    norm
}

pub fn gradient_norm(grads: &PredictorBank) -> f64 {
    global_norm(grads)
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(bank: &PredictorBank) -> Self {
        let zeros: Vec<Vec<f32>> = bank.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, bank: &mut PredictorBank, grads: &PredictorBank, lr: f32, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        let gs = grads.slices();
        for (k, p) in bank.slices_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], gs[k]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                p[i] = p[i] * decay - (lr as f64 * mh / (vh.sqrt() + cfg.eps as f64)) as f32;
            }
        }
        bank.bump_generation();
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub patches_per_level: Vec<(u8, usize)>,
}

/// One optimizer update from the summed gradients of `scenes`.
pub fn train_step(
    bank: &mut PredictorBank,
    adam: &mut AdamState,
    scenes: &[&Scene],
    cfg: &RunConfig,
    lr: f32,
    seed: u64,
) -> Result<StepReport> {
    let mut acc: Option<SceneGrads> = None;
    let mut counts = Vec::new();
    let mut rng = SplitMix64::new(seed);
    for scene in scenes {
        let sg = scene_gradients(bank, scene, &cfg.gen, &cfg.loss, cfg.train.n_tp, rng.next_u64())?;
        counts.extend(sg.patches_per_level.iter().copied());
        acc = Some(match acc {
            None => sg,
            Some(mut a) => {
                a.breakdown.add_scaled(&sg.breakdown, 1.0);
                for (d, s) in a.grads.slices_mut().into_iter().zip(sg.grads.slices()) {
                    for (x, y) in d.iter_mut().zip(s) {
                        *x += y;
                    }
                }
                a
            }
        });
    }
    let mut sg = acc.ok_or_else(|| Error::Config("train_step needs at least one scene".into()))?;
    let grad_norm = clip_gradients(&mut sg.grads, cfg.train.clip_norm);
    let clipped_norm = global_norm(&sg.grads);
    adam.update(bank, &sg.grads, lr, &cfg.train);
    let mut bd = sg.breakdown;
    let inv = 1.0 / scenes.len() as f64;
    bd = LossBreakdown {
        l1: bd.l1 * inv,
        giou: bd.giou * inv,
        cls_pos: bd.cls_pos * inv,
        cls_neg: bd.cls_neg * inv,
        total: bd.total * inv,
    };
    Ok(StepReport {
        breakdown: bd,
        grad_norm,
        clipped_norm,
        patches_per_level: counts,
    })
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub bank: PredictorBank,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<LossRow>,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> Self {
        let bank = PredictorBank::init(&cfg.model, cfg.train.seed);
        let adam = AdamState::new(&bank);
        Self {
            bank,
            adam,
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.bank.to_tensors();
        for (k, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            tensors.push(Tensor::new(format!("adam.m.{k}"), vec![m.len()], m.clone()));
            tensors.push(Tensor::new(format!("adam.v.{k}"), vec![v.len()], v.clone()));
        }
        let meta = serde_json::json!({
            "model": self.bank.model,
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "generation": self.bank.p5.generation,
            "history": self.history,
        });
        tensorfile::write(path, CHECKPOINT_KIND, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = tensorfile::read(path, CHECKPOINT_KIND)?;
        let meta = &manifest.meta;
        let bad = |what: &str| Error::format(path, format!("checkpoint meta: {what}"));
        let model = serde_json::from_value(meta["model"].clone()).map_err(|_| bad("model"))?;
        let mut set = TensorSet::new(tensors);
        let mut bank = PredictorBank::from_tensors(&model, &mut set)?;
        let generation = meta["generation"].as_u64().ok_or_else(|| bad("generation"))?;
        bank.p5.generation = generation;
        bank.p6.generation = generation;
        bank.adaptive.generation = generation;
        let lens: Vec<usize> = bank.slices().iter().map(|s| s.len()).collect();
        let mut m = Vec::with_capacity(lens.len());
        let mut v = Vec::with_capacity(lens.len());
        for (k, &n) in lens.iter().enumerate() {
            m.push(set.take(&format!("adam.m.{k}"), &[n])?);
            v.push(set.take(&format!("adam.v.{k}"), &[n])?);
        }
        Ok(Self {
            bank,
            adam: AdamState {
                m,
                v,
                t: meta["adam_t"].as_u64().ok_or_else(|| bad("adam_t"))?,
            },
            epoch: meta["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize,
            history: serde_json::from_value(meta["history"].clone()).map_err(|_| bad("history"))?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs in total (for staged runs); `None` runs all.
    pub stop_after_epoch: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

fn step_seed(seed: u64, step: u64) -> u64 {
    SplitMix64::new(seed.rotate_left(17) ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}

/// Run (or continue) the epoch loop from `state`.
pub fn train_from(ds: &Dataset, cfg: &RunConfig, mut state: TrainState, opts: &TrainOptions) -> Result<TrainState> {
    cfg.validate()?;
    if ds.scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let tc = &cfg.train;
    let n = ds.scenes.len();
    let steps = tc.steps_per_epoch.unwrap_or_else(|| n.div_ceil(tc.grad_accum));
    let last = opts.stop_after_epoch.unwrap_or(tc.epochs).min(tc.epochs);
    while state.epoch < last {
        let epoch = state.epoch;
        let order = epoch_order(n, tc.seed, epoch);
        let lr = tc.lr_at(epoch);
        for s in 0..steps {
            let scenes: Vec<&Scene> = (0..tc.grad_accum)
                .map(|k| &ds.scenes[order[(s * tc.grad_accum + k) % n]])
                .collect();
            let step = state.history.len() as u64;
            let rep = train_step(&mut state.bank, &mut state.adam, &scenes, cfg, lr, step_seed(tc.seed, step))?;
            state.history.push(LossRow {
                step,
                epoch,
                lr,
                l1: rep.breakdown.l1,
                giou: rep.breakdown.giou,
                cls_pos: rep.breakdown.cls_pos,
                cls_neg: rep.breakdown.cls_neg,
                total: rep.breakdown.total,
                grad_norm: rep.grad_norm,
            });
        }
        state.epoch += 1;
        if let Some(dir) = &opts.checkpoint_dir {
            if tc.checkpoint_every > 0 && state.epoch.is_multiple_of(tc.checkpoint_every) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                state.save(&checkpoint_path(dir, state.epoch))?;
            }
        }
    }
    Ok(state)
}

pub fn train(ds: &Dataset, cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainState> {
    train_from(ds, cfg, TrainState::fresh(cfg), opts)
}
