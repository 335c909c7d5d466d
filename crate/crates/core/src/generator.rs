//! Anchor generation: the fixed part on P5/P6, adaptive probing on the
//! finer levels, then gather, clamp and pad.

use serde::{Deserialize, Serialize};

use crate::assign::LevelPatches;
use crate::config::{EvalConfig, GenConfig};
use crate::error::{Error, Result};
use crate::featpyr::{
    compress_channels, crop_patch, downsample2, interpolate_bilinear, split_quadrants, FeatureMap,
    FeaturePyramid, Patch, PatchKind,
};
use crate::geometry::{nms, BBox};
use crate::predictor::{predict, AnchorOut, PredictorBank, PredictorParams, PredictorSlot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnchor {
    pub bbox: BBox,
    pub score: f32,
    /// 6 or 5 for the fixed part, the probed level otherwise; 0 for padding.
    pub origin_level: u8,
    /// Index of the originating patch within its level.
    pub origin_patch: usize,
    /// Side of the originating patch window in image units.
    pub patch_extent: f32,
    pub selected_for_probe: bool,
    pub replaced: bool,
}

impl ScoredAnchor {
    pub fn padding() -> Self {
        Self {
            bbox: BBox::default(),
            score: 0.0,
            origin_level: 0,
            origin_patch: 0,
            patch_extent: 0.0,
            selected_for_probe: false,
            replaced: false,
        }
    }

    fn from_out(a: &AnchorOut, level: u8, patch: usize, extent: f32) -> Self {
        Self {
            bbox: a.bbox,
            score: a.score,
            origin_level: level,
            origin_patch: patch,
            patch_extent: extent,
            selected_for_probe: false,
            replaced: false,
        }
    }

    /// Confidence inside `[eta_l, eta_h]` and size below half the patch extent.
    pub fn probe_eligible(&self, cfg: &GenConfig) -> bool {
        self.score >= cfg.eta_l
            && self.score <= cfg.eta_h
            && self.bbox.max_side() < 0.5 * self.patch_extent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub origin: (i32, i32),
    pub footprint: BBox,
    pub kind: PatchKind,
}

impl From<&Patch> for PatchRecord {
    fn from(p: &Patch) -> Self {
        Self {
            origin: p.origin,
            footprint: p.footprint,
            kind: p.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: u8,
    pub used: bool,
    /// Anchors of the previous level selected to spawn patches here.
    pub selected: usize,
    pub patches: Vec<PatchRecord>,
    pub invocations: usize,
}

/// FLOPs counted as `2 x` multiply-accumulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub predictor: u64,
    pub compression: u64,
    /// Bilinear interpolation and 2x pooling, 4 MACs per output value each.
    pub resample: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.predictor + self.compression + self.resample
    }

    pub fn add(&mut self, o: &FlopTally) {
        self.predictor += o.predictor;
        self.compression += o.compression;
        self.resample += o.resample;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrace {
    /// 6 and 5 first, then every probing level that was attempted.
    pub levels: Vec<LevelTrace>,
    pub levels_used: Vec<u8>,
    pub valid: usize,
    pub output_len: usize,
    pub flops: FlopTally,
}

impl GenTrace {
    pub fn level(&self, level: u8) -> Option<&LevelTrace> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn deepest_level(&self) -> u8 {
        self.levels_used.iter().copied().min().unwrap_or(5)
    }

    pub fn invocations(&self, level: u8) -> usize {
        self.level(level).map_or(0, |l| l.invocations)
    }

    pub fn patch_count(&self, level: u8) -> usize {
        self.level(level).map_or(0, |l| l.patches.len())
    }
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    /// Valid anchors by descending score, then padding up to `count_max`.
    pub anchors: Vec<ScoredAnchor>,
    pub mask: Vec<bool>,
    /// Every anchor predicted, in prediction order.
    pub pool: Vec<ScoredAnchor>,
    /// Pool index of each valid output anchor.
    pub output_index: Vec<usize>,
    pub trace: GenTrace,
    /// Generated patches per level (only with `keep_patches`).
    pub patches: Vec<LevelPatches>,
}

impl GenOutput {
    pub fn valid(&self) -> &[ScoredAnchor] {
        &self.anchors[..self.trace.valid]
    }
}

/// Compressed maps shared by generation and training.
#[derive(Debug, Clone)]
pub struct PreparedPyramid {
    /// Compressed P5 at native resolution.
    pub p5: FeatureMap,
    /// Compressed P5 interpolated to `2S x 2S`.
    pub interp: FeatureMap,
    /// `S x S` map derived by pooling `interp`.
    pub p6: FeatureMap,
    /// Compressed P4, P3 (index 0 = P4), filled on demand.
    probed: Vec<Option<FeatureMap>>,
}

fn resample_flops(map: &FeatureMap) -> u64 {
    2 * 4 * (map.channels * map.height * map.width) as u64
}

fn compress_flops(raw: &FeatureMap, c_out: usize) -> u64 {
    2 * (raw.channels * c_out * raw.height * raw.width) as u64
}

impl PreparedPyramid {
    pub fn new(pyramid: &FeaturePyramid, bank: &PredictorBank, cfg: &GenConfig) -> Result<Self> {
        let raw5 = pyramid.require(5)?;
        let p5 = compress_channels(raw5, &bank.proj_weight, &bank.proj_bias)?;
        let interp = interpolate_bilinear(&p5, cfg.interp_size, cfg.interp_size);
        let mut p6 = downsample2(&interp)?;
        p6.level = 6;
        Ok(Self {
            p5,
            interp,
            p6,
            probed: vec![None, None],
        })
    }

    /// Compressed map of a probing level (4 or 3).
    pub fn probed(&mut self, level: u8, pyramid: &FeaturePyramid, bank: &PredictorBank) -> Result<&FeatureMap> {
        let slot = (4 - level) as usize;
        if self.probed[slot].is_none() {
            let raw = pyramid.require(level)?;
            self.probed[slot] = Some(compress_channels(raw, &bank.proj_weight, &bank.proj_bias)?);
        }
        Ok(self.probed[slot].as_ref().expect("filled above"))
    }

    /// A probing-level map if it has been computed.
    pub fn probed_ref(&self, level: u8) -> Option<&FeatureMap> {
        self.probed.get((4 - level) as usize).and_then(Option::as_ref)
    }
}

fn run_patches(
    params: &PredictorParams,
    patches: &[Patch],
    level: u8,
    flops: &mut FlopTally,
) -> Result<Vec<ScoredAnchor>> {
    let mut out = Vec::with_capacity(patches.len() * params.anchors);
    for (k, p) in patches.iter().enumerate() {
        let (anchors, _) = predict(params, p)?;
        flops.predictor += 2 * params.macs();
        out.extend(
            anchors
                .iter()
                .map(|a| ScoredAnchor::from_out(a, level, k, p.extent.w.max(p.extent.h))),
        );
    }
    Ok(out)
}

/// Anchors and patches of the fixed part.
#[derive(Debug, Clone)]
pub struct FixedPart {
    /// Quadrant anchors (P5) followed by the P6 anchors.
    pub anchors: Vec<ScoredAnchor>,
    pub quadrants: Vec<Patch>,
    pub p6: Patch,
    pub flops: FlopTally,
}

pub fn run_fixed_part(prepared: &PreparedPyramid, pyramid: &FeaturePyramid, bank: &PredictorBank) -> Result<FixedPart> {
    let raw5 = pyramid.require(5)?;
    let mut flops = FlopTally {
        compression: compress_flops(raw5, bank.model.channels),
        resample: resample_flops(&prepared.interp) + resample_flops(&prepared.p6),
        ..FlopTally::default()
    };
    let quadrants = split_quadrants(&prepared.interp)?.to_vec();
    let p6 = Patch::from_window(&prepared.p6, (0, 0), prepared.p6.height, PatchKind::FixedP6);
    let mut anchors = run_patches(bank.params(PredictorSlot::P5), &quadrants, 5, &mut flops)?;
    anchors.extend(run_patches(
        bank.params(PredictorSlot::P6),
        std::slice::from_ref(&p6),
        6,
        &mut flops,
    )?);
    Ok(FixedPart {
        anchors,
        quadrants,
        p6,
        flops,
    })
}

/// Indices of the anchors eligible for probing; their flag is set.
pub fn select_probe_anchors(anchors: &mut [ScoredAnchor], idx: &[usize], cfg: &GenConfig) -> Vec<usize> {
    let mut out = Vec::new();
    for &i in idx {
        if anchors[i].probe_eligible(cfg) {
            anchors[i].selected_for_probe = true;
            out.push(i);
        }
    }
    out
}

/// Probe patches for the selected anchors on the next level.
#[derive(Debug, Clone)]
pub struct ProbePatches {
    pub patches: Vec<Patch>,
    /// Position in the selected list of the anchor that spawned each patch.
    pub spawners: Vec<usize>,
}

/// One candidate per anchor, centered on the anchor's cell; NMS over the
/// candidate footprints at `eta_iou`, then the `patch_cap` best survive.
pub fn build_probe_patches(selected: &[ScoredAnchor], map: &FeatureMap, cfg: &GenConfig) -> Result<ProbePatches> {
    let s = cfg.patch_size;
    let centers: Vec<(i32, i32)> = selected
        .iter()
        .map(|a| map.cell_of(a.bbox.cx, a.bbox.cy))
        .collect();
    let footprints: Vec<BBox> = centers
        .iter()
        .map(|&c| {
            let origin = crate::featpyr::centered_origin(c, s);
            let [x1, y1, x2, y2] = map.window_extent(origin, s).corners();
            BBox::from_corners(x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0))
        })
        .collect();
    let scores: Vec<f32> = selected.iter().map(|a| a.score).collect();
    let mut keep = nms(&footprints, &scores, cfg.eta_iou)?;
    keep.truncate(cfg.patch_cap);
    Ok(ProbePatches {
        patches: keep.iter().map(|&k| crop_patch(map, centers[k], s)).collect(),
        spawners: keep,
    })
}

/// Order by descending score; equal scores keep pool order.
fn by_score(pool: &[ScoredAnchor], mut idx: Vec<usize>) -> Vec<usize> {
    idx.sort_by(|&a, &b| pool[b].score.total_cmp(&pool[a].score).then(a.cmp(&b)));
    idx
}

/// Final selection: gate at `eta_f`, clamp the count into the configured range.
pub fn gather(pool: &[ScoredAnchor], cfg: &GenConfig) -> Vec<usize> {
    let live: Vec<usize> = (0..pool.len()).filter(|&i| !pool[i].replaced).collect();
    if cfg.topk_mode {
        let mut all = by_score(pool, live);
        all.truncate(cfg.count_max);
        return all;
    }
    let (pass, fail): (Vec<usize>, Vec<usize>) = live.into_iter().partition(|&i| pool[i].score > cfg.eta_f);
    let mut out = by_score(pool, pass);
    if out.len() > cfg.count_max {
        out.truncate(cfg.count_max);
    } else if out.len() < cfg.count_min {
        let need = cfg.count_min - out.len();
        out.extend(by_score(pool, fail).into_iter().take(need));
        out = by_score(pool, out);
    }
    out
}

pub fn generate(pyramid: &FeaturePyramid, bank: &PredictorBank, cfg: &GenConfig) -> Result<GenOutput> {
    let mut prepared = PreparedPyramid::new(pyramid, bank, cfg)?;
    generate_prepared(&mut prepared, pyramid, bank, cfg, false)
}

pub fn generate_prepared(
    prepared: &mut PreparedPyramid,
    pyramid: &FeaturePyramid,
    bank: &PredictorBank,
    cfg: &GenConfig,
    keep_patches: bool,
) -> Result<GenOutput> {
    cfg.validate()?;
    cfg.check_model(&bank.model)?;
    let fixed = run_fixed_part(prepared, pyramid, bank)?;
    let mut flops = fixed.flops;
    let mut pool = fixed.anchors;
    let mut levels = vec![
        LevelTrace {
            level: 6,
            used: true,
            selected: 0,
            patches: vec![PatchRecord::from(&fixed.p6)],
            invocations: 1,
        },
        LevelTrace {
            level: 5,
            used: true,
            selected: 0,
            patches: fixed.quadrants.iter().map(PatchRecord::from).collect(),
            invocations: fixed.quadrants.len(),
        },
    ];
    let mut levels_used = vec![6, 5];
    let mut kept = Vec::new();
    if keep_patches {
        kept.push(LevelPatches {
            level: 5,
            patches: fixed.quadrants.clone(),
        });
    }

    let mut current: Vec<usize> = (0..pool.len()).collect();
    let adaptive = bank.params(PredictorSlot::Adaptive);
    for level in (cfg.lowest_level..=4).rev() {
        let selected = select_probe_anchors(&mut pool, &current, cfg);
        if selected.len() < cfg.early_stop_min {
            for &i in &selected {
                pool[i].selected_for_probe = false;
            }
            levels.push(LevelTrace {
                level,
                used: false,
                selected: selected.len(),
                patches: Vec::new(),
                invocations: 0,
            });
            break;
        }
        let raw = pyramid.require(level)?;
        flops.compression += compress_flops(raw, bank.model.channels);
        let map = prepared.probed(level, pyramid, bank)?;
        let chosen: Vec<ScoredAnchor> = selected.iter().map(|&i| pool[i]).collect();
        let probes = build_probe_patches(&chosen, map, cfg)?;
        let mut survived = vec![false; selected.len()];
        for &k in &probes.spawners {
            survived[k] = true;
        }
        for (k, &i) in selected.iter().enumerate() {
            if !survived[k] {
                pool[i].selected_for_probe = false;
            } else if cfg.replace_selected {
                pool[i].replaced = true;
            }
        }
        let fresh = run_patches(adaptive, &probes.patches, level, &mut flops)?;
        let start = pool.len();
        pool.extend(fresh);
        current = (start..pool.len()).collect();
        levels.push(LevelTrace {
            level,
            used: true,
            selected: selected.len(),
            patches: probes.patches.iter().map(PatchRecord::from).collect(),
            invocations: probes.patches.len(),
        });
        levels_used.push(level);
        if keep_patches {
            kept.push(LevelPatches {
                level,
                patches: probes.patches,
            });
        }
    }

    let output_index = gather(&pool, cfg);
    let valid = output_index.len();
    let mut anchors: Vec<ScoredAnchor> = output_index.iter().map(|&i| pool[i]).collect();
    let mut mask = vec![true; valid];
    anchors.resize(cfg.count_max.max(valid), ScoredAnchor::padding());
    mask.resize(anchors.len(), false);
    Ok(GenOutput {
        trace: GenTrace {
            levels,
            levels_used,
            valid,
            output_len: anchors.len(),
            flops,
        },
        anchors,
        mask,
        pool,
        output_index,
        patches: kept,
    })
}

/// Dense baseline: one predictor call per grid cell of P6, interpolated P5
/// and every probing level down to `lowest_level`, plus the same
/// compression and resampling work.
pub fn dense_flops(pyramid: &FeaturePyramid, bank: &PredictorBank, cfg: &GenConfig) -> Result<FlopTally> {
    let s = cfg.patch_size as u64;
    let i = cfg.interp_size as u64;
    let c = bank.model.channels as u64;
    let raw5 = pyramid.require(5)?;
    let mut t = FlopTally {
        compression: compress_flops(raw5, bank.model.channels),
        resample: 2 * 4 * c * (i * i + s * s),
        ..FlopTally::default()
    };
    t.predictor += 2 * s * s * bank.params(PredictorSlot::P6).macs();
    t.predictor += 2 * i * i * bank.params(PredictorSlot::P5).macs();
    for level in cfg.lowest_level..=4 {
        let raw = pyramid.require(level)?;
        t.compression += compress_flops(raw, bank.model.channels);
        t.predictor += 2 * (raw.height * raw.width) as u64 * bank.params(PredictorSlot::Adaptive).macs();
    }
    Ok(t)
}

/// RoIAlign features over the compressed P5 map; padded anchors get zeros.
pub fn export_proposals(
    pyramid: &FeaturePyramid,
    bank: &PredictorBank,
    anchors: &[ScoredAnchor],
    mask: &[bool],
    eval: &EvalConfig,
) -> Result<Vec<Vec<f32>>> {
    if anchors.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} mask entries",
            anchors.len(),
            mask.len()
        )));
    }
    let p5 = compress_channels(pyramid.require(5)?, &bank.proj_weight, &bank.proj_bias)?;
    let len = p5.channels * eval.roi_out * eval.roi_out;
    anchors
        .iter()
        .zip(mask)
        .map(|(a, &m)| {
            if m && a.bbox.w > 0.0 && a.bbox.h > 0.0 {
                crate::featpyr::roi_align(&p5, &a.bbox, eval.roi_out, eval.roi_sampling)
            } else {
                Ok(vec![0.0; len])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::SplitMix64;

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden: vec![16],
            raw_channels: 4,
            channels: 2,
            ..ModelConfig::default()
        }
    }

    fn noise_pyramid(seed: u64, raw: usize) -> FeaturePyramid {
        let mut rng = SplitMix64::new(seed);
        let mut m = |level, dim: usize| {
            let n = raw * dim * dim;
            FeatureMap::from_values(level, raw, dim, dim, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
        };
        FeaturePyramid::new(vec![m(3, 60), m(4, 30), m(5, 15)])
    }

    #[test]
    fn zero_bank_trace() {
        let model = ModelConfig::default();
        let bank = PredictorBank::zeros(&model);
        let pyr = noise_pyramid(1, model.raw_channels);
        let cfg = GenConfig::default();
        let out = generate(&pyr, &bank, &cfg).unwrap();
        let fixed: Vec<&ScoredAnchor> = out.pool.iter().filter(|a| a.origin_level >= 5).collect();
        assert_eq!(fixed.len(), 250);
        assert_eq!(out.pool.len(), 250);
        for a in &fixed {
            assert_eq!(a.score, 0.5);
            assert_eq!((a.bbox.w, a.bbox.h), (0.5, 0.5));
            assert!(!a.selected_for_probe);
        }
        // Quadrant anchors sit at their quadrant centers.
        assert_eq!((out.pool[0].bbox.cx, out.pool[0].bbox.cy), (0.25, 0.25));
        assert_eq!((out.pool[199].bbox.cx, out.pool[199].bbox.cy), (0.75, 0.75));
        assert_eq!((out.pool[249].bbox.cx, out.pool[249].bbox.cy), (0.5, 0.5));

        assert_eq!(out.trace.levels_used, vec![6, 5]);
        assert_eq!(out.trace.invocations(4), 0);
        assert_eq!(out.trace.level(4).unwrap().selected, 0);
        assert_eq!(out.trace.valid, 200);
        assert_eq!(out.output_index, (0..200).collect::<Vec<_>>());
        assert_eq!(out.anchors.len(), 200);
        assert!(out.mask.iter().all(|&m| m));
    }

    #[test]
    fn disabled_probing_equals_fixed_part() {
        let model = small_model();
        let bank = PredictorBank::init(&model, 4);
        let pyr = noise_pyramid(2, model.raw_channels);
        let cfg = GenConfig {
            lowest_level: 5,
            ..GenConfig::default()
        };
        let out = generate(&pyr, &bank, &cfg).unwrap();
        let prepared = PreparedPyramid::new(&pyr, &bank, &cfg).unwrap();
        let fixed = run_fixed_part(&prepared, &pyr, &bank).unwrap();
        assert_eq!(out.pool, fixed.anchors);
        assert_eq!(out.output_index, gather(&fixed.anchors, &cfg));
        assert_eq!(out.trace.levels_used, vec![6, 5]);
    }

    fn anchor(cx: f32, cy: f32, side: f32, score: f32, extent: f32) -> ScoredAnchor {
        ScoredAnchor {
            bbox: BBox::new(cx, cy, side, side),
            score,
            origin_level: 5,
            origin_patch: 0,
            patch_extent: extent,
            selected_for_probe: false,
            replaced: false,
        }
    }

    #[test]
    fn selection_rules() {
        let cfg = GenConfig::default();
        let mut pool = vec![
            anchor(0.3, 0.3, 0.05, 0.05, 0.5),
            anchor(0.3, 0.3, 0.05, 0.8, 0.5),
            anchor(0.3, 0.3, 0.3, 0.5, 0.5),
            anchor(0.3, 0.3, 0.05, 0.5, 0.5),
            anchor(0.3, 0.3, 0.05, 0.1, 0.5),
            anchor(0.3, 0.3, 0.05, 0.7, 0.5),
        ];
        let idx: Vec<usize> = (0..pool.len()).collect();
        let sel = select_probe_anchors(&mut pool, &idx, &cfg);
        assert_eq!(sel, vec![3, 4, 5]);
        assert!(pool[3].selected_for_probe && !pool[0].selected_for_probe);
    }

    #[test]
    fn probe_patch_rules() {
        let cfg = GenConfig::default();
        let map = FeatureMap::zeros(4, 2, 30, 30);
        let same = [anchor(0.4, 0.4, 0.05, 0.5, 0.5), anchor(0.4, 0.4, 0.05, 0.6, 0.5)];
        let p = build_probe_patches(&same, &map, &cfg).unwrap();
        assert_eq!(p.spawners, vec![1]);

        // 20 anchors on a large map whose windows do not overlap.
        let big = FeatureMap::zeros(3, 2, 400, 400);
        let spread: Vec<ScoredAnchor> = (0..20)
            .map(|k| {
                let (r, c) = (k / 5, k % 5);
                anchor(0.1 + 0.2 * c as f32, 0.1 + 0.25 * r as f32, 0.01, 0.2 + 0.02 * k as f32, 0.5)
            })
            .collect();
        let p = build_probe_patches(&spread, &big, &cfg).unwrap();
        assert_eq!(p.patches.len(), 15);
        assert_eq!(p.spawners, (5..20).rev().collect::<Vec<_>>());
    }

    #[test]
    fn probe_counts_fall_with_nms_threshold() {
        let map = FeatureMap::zeros(3, 2, 60, 60);
        let mut rng = SplitMix64::new(8);
        let sel: Vec<ScoredAnchor> = (0..40)
            .map(|_| anchor(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), 0.02, rng.uniform(0.1, 0.7), 0.25))
            .collect();
        let counts: Vec<usize> = [0.4, 0.25, 0.2, 0.1]
            .iter()
            .map(|&t| {
                let cfg = GenConfig {
                    eta_iou: t,
                    patch_cap: 100,
                    ..GenConfig::default()
                };
                build_probe_patches(&sel, &map, &cfg).unwrap().patches.len()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn gather_clamps() {
        let cfg = GenConfig::default();
        let pool: Vec<ScoredAnchor> = [0.05, 0.5, 0.02, 0.3, 0.01, 0.09, 0.08]
            .iter()
            .map(|&s| anchor(0.5, 0.5, 0.1, s, 1.0))
            .collect();
        // Two pass the gate; three more come from the failed ones by score.
        assert_eq!(gather(&pool, &cfg), vec![1, 3, 5, 6, 0]);
        let topk = GenConfig {
            topk_mode: true,
            count_max: 3,
            ..cfg
        };
        assert_eq!(gather(&pool, &topk), vec![1, 3, 5]);
    }

    #[test]
    fn determinism_and_invariants() {
        let model = small_model();
        let bank = PredictorBank::init(&model, 9);
        // Loosen the band so probing actually runs with random weights.
        let cfg = GenConfig {
            eta_l: 0.0,
            eta_h: 1.0,
            ..GenConfig::default()
        };
        let mut probed = false;
        for seed in 0..5 {
            let pyr = noise_pyramid(seed, model.raw_channels);
            let mut small = bank.clone();
            // Shrink predicted sizes so anchors qualify for probing.
            let head = small.p5.layers.last_mut().unwrap();
            for o in 0..head.out_dim {
                if o % 5 == 2 || o % 5 == 3 {
                    head.bias[o] = -4.0;
                }
            }
            small.p6 = small.p5.clone();
            let head = small.adaptive.layers.last_mut().unwrap();
            for o in 0..head.out_dim {
                if o % 5 == 2 || o % 5 == 3 {
                    head.bias[o] = -5.0;
                }
            }
            let a = generate(&pyr, &small, &cfg).unwrap();
            let b = generate(&pyr, &small, &cfg).unwrap();
            assert_eq!(a.anchors, b.anchors);
            assert_eq!(a.trace, b.trace);
            probed |= a.trace.levels_used.contains(&3);
            for lt in &a.trace.levels {
                assert!(lt.patches.len() <= cfg.patch_cap);
                if !lt.used {
                    assert_eq!(lt.invocations, 0);
                }
            }
            assert!((cfg.count_min..=cfg.count_max).contains(&a.trace.valid));
            for p in &a.pool {
                assert!(!p.replaced || p.selected_for_probe);
            }
            let keep = GenConfig {
                replace_selected: false,
                ..cfg.clone()
            };
            let k = generate(&pyr, &small, &keep).unwrap();
            let live = |o: &GenOutput| o.pool.iter().filter(|p| !p.replaced && p.score > cfg.eta_f).count();
            assert!(live(&k) >= live(&a));
            assert!(k.trace.valid >= a.trace.valid);

            let dense = dense_flops(&pyr, &small, &cfg).unwrap();
            assert!(a.trace.flops.total() <= dense.total());
        }
        assert!(probed);
    }

    #[test]
    fn export_matches_direct_roi_align() {
        let model = small_model();
        let bank = PredictorBank::init(&model, 1);
        let pyr = noise_pyramid(3, model.raw_channels);
        let out = generate(&pyr, &bank, &GenConfig::default()).unwrap();
        let mut anchors = out.anchors.clone();
        let mut mask = out.mask.clone();
        anchors.push(ScoredAnchor::padding());
        mask.push(false);
        anchors.push(anchor(0.5, 0.5, 1.0, 0.9, 1.0));
        mask.push(true);
        let eval = EvalConfig::default();
        let feats = export_proposals(&pyr, &bank, &anchors, &mask, &eval).unwrap();
        let p5 = compress_channels(pyr.require(5).unwrap(), &bank.proj_weight, &bank.proj_bias).unwrap();
        let n = anchors.len();
        assert!(feats[n - 2].iter().all(|&v| v == 0.0));
        assert_eq!(feats[n - 1], crate::featpyr::roi_align(&p5, &anchors[n - 1].bbox, 7, 2).unwrap());
        assert_eq!(feats[0], crate::featpyr::roi_align(&p5, &anchors[0].bbox, 7, 2).unwrap());
    }

    #[test]
    fn flop_formula_instance() {
        let p = PredictorParams::zeros(15, 8, &[256, 256], 50);
        assert_eq!(2 * p.macs(), 2 * (1800 * 256 + 256 * 256 + 256 * 250));
    }
}
