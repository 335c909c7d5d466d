//! Proposal recall, count correlation, level usage, FLOP tallies and the
//! ablation sweep.

use serde::{Deserialize, Serialize};

use crate::config::GenConfig;
use crate::error::{Error, Result};
use crate::generator::{dense_flops, generate, FlopTally, GenOutput, GenTrace, ScoredAnchor};
use crate::geometry::{iou, BBox};
use crate::predictor::PredictorBank;
use crate::synthdata::{Scene, SizeClass};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f32> {
    (0..10).map(|k| 0.5 + 0.05 * k as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Recall averaged over the IoU thresholds.
    pub ar: f64,
    pub ar50: f64,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
    pub budget: usize,
    pub gts: usize,
    pub images: usize,
    pub mean_proposals: f64,
}

impl RecallReport {
    pub fn class(&self, c: SizeClass) -> Option<f64> {
        match c {
            SizeClass::Small => self.ar_small,
            SizeClass::Medium => self.ar_medium,
            SizeClass::Large => self.ar_large,
        }
    }
}

/// Per-GT match flags at one threshold: each GT in input order takes its
/// best unused anchor among the top `budget` by score.
pub fn greedy_matches(anchors: &[(BBox, f32)], gts: &[BBox], budget: usize, thr: f32) -> Vec<bool> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| anchors[b].1.total_cmp(&anchors[a].1).then(a.cmp(&b)));
    order.truncate(budget);
    let mut used = vec![false; order.len()];
    gts.iter()
        .map(|g| {
            let mut best = None;
            let mut best_iou = f32::NEG_INFINITY;
            for (k, &i) in order.iter().enumerate() {
                if used[k] {
                    continue;
                }
                let v = iou(&anchors[i].0, g);
                if v > best_iou {
                    best_iou = v;
                    best = Some(k);
                }
            }
            match best {
                Some(k) if best_iou >= thr => {
                    used[k] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Average recall over images. `classes` gives the size class of every GT.
pub fn average_recall(
    anchors: &[Vec<(BBox, f32)>],
    gts: &[Vec<BBox>],
    classes: &[Vec<SizeClass>],
    budget: usize,
) -> Result<RecallReport> {
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    if anchors.len() != gts.len() || gts.len() != classes.len() {
        return Err(Error::Shape("anchors, gts and classes differ in image count".into()));
    }
    let thrs = iou_thresholds();
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut hits = vec![0usize; thrs.len()];
    let mut class_hits = [0usize; 3];
    let mut class_total = [0usize; 3];
    for ((a, g), c) in anchors.iter().zip(gts).zip(classes) {
        for (t, &thr) in thrs.iter().enumerate() {
            let m = greedy_matches(a, g, budget, thr);
            hits[t] += m.iter().filter(|&&x| x).count();
            for (k, &hit) in m.iter().enumerate() {
                let ci = c[k] as usize;
                if hit {
                    class_hits[ci] += 1;
                }
                if t == 0 {
                    class_total[ci] += 1;
                }
            }
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let per_class = |ci: usize| {
        (class_total[ci] > 0).then(|| class_hits[ci] as f64 / (class_total[ci] * thrs.len()) as f64)
    };
    Ok(RecallReport {
        ar: hits.iter().map(|&h| frac(h, total)).sum::<f64>() / thrs.len() as f64,
        ar50: frac(hits[0], total),
        ar_small: per_class(0),
        ar_medium: per_class(1),
        ar_large: per_class(2),
        budget,
        gts: total,
        images: gts.len(),
        mean_proposals: anchors.iter().map(|a| a.len().min(budget) as f64).sum::<f64>() / anchors.len().max(1) as f64,
    })
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two series of equal length >= 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Rank correlation between GT counts and valid-anchor counts per image.
pub fn count_correlation(traces: &[GenTrace], gt_counts: &[usize]) -> Result<f64> {
    let a: Vec<f64> = traces.iter().map(|t| t.valid as f64).collect();
    let g: Vec<f64> = gt_counts.iter().map(|&c| c as f64).collect();
    spearman(&g, &a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelHistogram {
    pub p5_only: f64,
    pub p4: f64,
    pub p3: f64,
}

/// Fraction of images whose deepest used level is P5, P4 or P3.
pub fn level_histogram(traces: &[GenTrace]) -> Result<LevelHistogram> {
    if traces.is_empty() {
        return Err(Error::Config("level histogram needs at least one trace".into()));
    }
    let mut c = [0usize; 3];
    for t in traces {
        match t.deepest_level() {
            3 => c[2] += 1,
            4 => c[1] += 1,
            _ => c[0] += 1,
        }
    }
    let n = traces.len() as f64;
    Ok(LevelHistogram {
        p5_only: c[0] as f64 / n,
        p4: c[1] as f64 / n,
        p3: c[2] as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub images: usize,
    pub sparse: FlopTally,
    pub dense: FlopTally,
}

impl FlopReport {
    pub fn mean_sparse(&self) -> f64 {
        self.sparse.total() as f64 / self.images.max(1) as f64
    }

    pub fn mean_sparse_predictor(&self) -> f64 {
        self.sparse.predictor as f64 / self.images.max(1) as f64
    }

    pub fn ratio(&self) -> f64 {
        self.sparse.total() as f64 / self.dense.total().max(1) as f64
    }
}

/// Sparse tally of one trace next to the dense per-cell baseline.
pub fn flop_count(trace: &GenTrace, dense: &FlopTally) -> FlopReport {
    FlopReport {
        images: 1,
        sparse: trace.flops,
        dense: *dense,
    }
}

/// Map `f` over `items` on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Generation results and metrics for one configuration over a scene set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub outputs: Vec<GenOutput>,
    pub recall: RecallReport,
    pub correlation: Option<f64>,
    pub histogram: LevelHistogram,
    pub flops: FlopReport,
    pub mean_anchors: f64,
    /// Mean probe patches per image at P4 and P3.
    pub mean_patches: [f64; 2],
}

pub fn evaluate(scenes: &[Scene], bank: &PredictorBank, gen: &GenConfig, budget: usize, jobs: usize) -> Result<Evaluation> {
    gen.validate()?;
    gen.check_model(&bank.model)?;
    let outputs = par_map(scenes, jobs, |s| generate(&s.pyramid, bank, gen))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let anchors: Vec<Vec<(BBox, f32)>> = outputs
        .iter()
        .map(|o| o.valid().iter().map(|a: &ScoredAnchor| (a.bbox, a.score)).collect())
        .collect();
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.spec.boxes.clone()).collect();
    let classes: Vec<Vec<SizeClass>> = scenes.iter().map(|s| s.spec.classes.clone()).collect();
    let recall = average_recall(&anchors, &gts, &classes, budget)?;
    let traces: Vec<GenTrace> = outputs.iter().map(|o| o.trace.clone()).collect();
    let counts: Vec<usize> = scenes.iter().map(|s| s.spec.boxes.len()).collect();
    let correlation = count_correlation(&traces, &counts).ok();
    let histogram = level_histogram(&traces)?;
    let mut flops = FlopReport::default();
    for (o, s) in outputs.iter().zip(scenes) {
        let d = dense_flops(&s.pyramid, bank, gen)?;
        flops.images += 1;
        flops.sparse.add(&o.trace.flops);
        flops.dense.add(&d);
    }
    let n = scenes.len().max(1) as f64;
    let mean_anchors = traces.iter().map(|t| t.valid as f64).sum::<f64>() / n;
    let mean_patches = [
        traces.iter().map(|t| t.patch_count(4) as f64).sum::<f64>() / n,
        traces.iter().map(|t| t.patch_count(3) as f64).sum::<f64>() / n,
    ];
    Ok(Evaluation {
        outputs,
        recall,
        correlation,
        histogram,
        flops,
        mean_anchors,
        mean_patches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub config: GenConfig,
    pub ar: f64,
    pub ar50: f64,
    pub mean_anchors: f64,
    pub mean_patches_p4: f64,
    pub mean_patches_p3: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "label,eta_l,eta_h,eta_f,eta_iou,lowest_level,ar,ar50,mean_anchors,mean_patches_p4,mean_patches_p3";

    pub fn csv(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.3},{:.3},{:.3}",
            self.label,
            c.eta_l,
            c.eta_h,
            c.eta_f,
            c.eta_iou,
            c.lowest_level,
            self.ar,
            self.ar50,
            self.mean_anchors,
            self.mean_patches_p4,
            self.mean_patches_p3
        )
    }
}

/// Evaluate every configuration with the same bank. Configurations whose
/// patch size differs from the bank's are rejected.
pub fn ablation_sweep(
    scenes: &[Scene],
    bank: &PredictorBank,
    grid: &[(String, GenConfig)],
    budget: usize,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    for (label, g) in grid {
        g.check_model(&bank.model)
            .map_err(|e| Error::Config(format!("sweep entry {label}: {e}")))?;
    }
    grid.iter()
        .map(|(label, g)| {
            let ev = evaluate(scenes, bank, g, budget, jobs)?;
            Ok(SweepRow {
                label: label.clone(),
                config: g.clone(),
                ar: ev.recall.ar,
                ar50: ev.recall.ar50,
                mean_anchors: ev.mean_anchors,
                mean_patches_p4: ev.mean_patches[0],
                mean_patches_p3: ev.mean_patches[1],
            })
        })
        .collect()
}

/// The threshold and NMS grids of the ablation study.
pub fn standard_grid(base: &GenConfig) -> Vec<(String, GenConfig)> {
    let mut grid = Vec::new();
    for eta_l in [0.3f32, 0.2, 0.1, 0.05] {
        grid.push((format!("eta_l={eta_l}"), GenConfig { eta_l, ..base.clone() }));
    }
    for eta_iou in [0.4f32, 0.25, 0.2, 0.1] {
        grid.push((format!("eta_iou={eta_iou}"), GenConfig { eta_iou, ..base.clone() }));
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f32, cy: f32, w: f32) -> BBox {
        BBox::new(cx, cy, w, w)
    }

    #[test]
    fn recall_cases() {
        let gts = vec![vec![b(0.3, 0.3, 0.2), b(0.7, 0.7, 0.1)]];
        let cls = vec![vec![SizeClass::Medium, SizeClass::Small]];
        let exact: Vec<Vec<(BBox, f32)>> = vec![gts[0].iter().map(|g| (*g, 0.9)).collect()];
        let r = average_recall(&exact, &gts, &cls, 200).unwrap();
        assert_eq!((r.ar, r.ar50), (1.0, 1.0));
        assert_eq!(r.ar_large, None);

        let r = average_recall(&[vec![]], &gts, &cls, 200).unwrap();
        assert_eq!(r.ar, 0.0);

        let half = vec![vec![(gts[0][0], 0.9), (b(0.1, 0.9, 0.05), 0.8)]];
        let r = average_recall(&half, &gts, &cls, 200).unwrap();
        assert!((r.ar - 0.5).abs() < 1e-12 && (r.ar50 - 0.5).abs() < 1e-12);
        assert_eq!(r.ar_medium, Some(1.0));
        assert_eq!(r.ar_small, Some(0.0));

        // Budget 1 keeps only the best-scored anchor.
        let two = vec![vec![(gts[0][0], 0.5), (gts[0][1], 0.9)]];
        let r = average_recall(&two, &gts, &cls, 1).unwrap();
        assert!((r.ar - 0.5).abs() < 1e-12);
        assert_eq!(r.ar_small, Some(1.0));
    }

    #[test]
    fn spearman_cases() {
        let g = [1.0, 2.0, 3.0, 5.0, 8.0];
        assert!((spearman(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = g.iter().map(|v| 100.0 - v).collect();
        assert!((spearman(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(spearman(&g, &[4.0; 5]), Err(Error::UndefinedCorrelation(_))));
        // Ties take average ranks: reference value from the textbook formula.
        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let r = spearman(&x, &y).unwrap();
        // ranks x: 1, 2.5, 2.5, 4; y: 1, 3, 2, 4
        let expect = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((r - expect).abs() < 1e-12, "{r} vs {expect}");
    }

    fn trace(levels: Vec<u8>) -> GenTrace {
        GenTrace {
            levels: vec![],
            levels_used: levels,
            valid: 0,
            output_len: 0,
            flops: FlopTally::default(),
        }
    }

    #[test]
    fn histogram_partitions() {
        let h = level_histogram(&[trace(vec![6, 5]), trace(vec![6, 5, 4]), trace(vec![6, 5, 4, 3]), trace(vec![6, 5])]).unwrap();
        assert_eq!((h.p5_only, h.p4, h.p3), (0.5, 0.25, 0.25));
        assert!((h.p5_only + h.p4 + h.p3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), par_map(&v, 1, |x| x * 2));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<(BBox, f32)>, Vec<BBox>)> {
        let bx = (0.05f32..0.95, 0.05f32..0.95, 0.02f32..0.4, 0.02f32..0.4).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h));
        (
            prop::collection::vec((bx.clone(), 0.0f32..1.0), 0..30),
            prop::collection::vec(bx, 1..8),
        )
    }

    proptest! {
        #[test]
        fn recall_monotone_in_budget((anchors, gts) in arb_case()) {
            let cls = vec![gts.iter().map(SizeClass::of).collect::<Vec<_>>()];
            let mut prev = -1.0;
            for budget in [1usize, 3, 10, 30] {
                let r = average_recall(std::slice::from_ref(&anchors), std::slice::from_ref(&gts), &cls, budget).unwrap();
                prop_assert!(r.ar >= prev - 1e-12);
                prop_assert!(r.ar50 >= r.ar - 1e-12);
                prev = r.ar;
            }
        }
    }
}
