//! Per-patch one-to-one assignment and training-patch composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featpyr::{centered_origin, FeatureMap, Patch, PatchKind};
use crate::geometry::{giou, BBox};
use crate::losses::l1_distance;
use crate::rng::SplitMix64;

/// Filler cost for the rows/columns added to square a rectangular problem.
pub const PAD_COST: f64 = 1e6;

/// Dense row-major cost matrix, rows = anchors, cols = targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost matrix size");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(anchor, target)` pairs sorted by anchor index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self::from_pairs(rows, cols, Vec::new())
    }

    pub fn from_pairs(rows: usize, cols: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.at(r, c)).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Shortest augmenting path with potentials, O(n^3) on the padded square
/// matrix. Among equal reduced costs the lowest column index wins, so the
/// result is a deterministic function of the matrix.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    for (k, v) in cost.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NanCost {
                row: k / cost.cols,
                col: k % cost.cols,
            });
        }
    }
    let (r, c) = (cost.rows, cost.cols);
    if r == 0 || c == 0 {
        return Ok(Assignment::empty(r, c));
    }
    let n = r.max(c);
    let a = |i: usize, j: usize| -> f64 {
        if i < r && j < c {
            cost.at(i, j)
        } else {
            PAD_COST
        }
    };
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=n)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .filter(|&(i, j)| i < r && j < c)
        .collect();
    Ok(Assignment::from_pairs(r, c, pairs))
}

/// Coefficients of the matching cost; the score term replaces the class term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCoeffs {
    pub l1: f32,
    pub giou: f32,
    pub score: f32,
}

impl Default for MatchCoeffs {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            score: 2.0,
        }
    }
}

/// `l1 * L1 + giou * (1 - GIoU) - score * s` for every anchor/target pair.
/// No query weighting enters the cost.
pub fn match_cost(boxes: &[BBox], scores: &[f32], gts: &[BBox], coeffs: &MatchCoeffs) -> CostMatrix {
    assert_eq!(boxes.len(), scores.len());
    let mut data = Vec::with_capacity(boxes.len() * gts.len());
    for (b, &s) in boxes.iter().zip(scores) {
        for g in gts {
            let v = coeffs.l1 as f64 * l1_distance(b, g) as f64
                + coeffs.giou as f64 * (1.0 - giou(b, g) as f64)
                - coeffs.score as f64 * s as f64;
            data.push(v);
        }
    }
    CostMatrix::new(boxes.len(), gts.len(), data)
}

/// Indices of the boxes whose centers lie in the patch footprint
/// (half-open on the right and bottom edges; closed at the image border).
pub fn targets_in_patch(patch: &Patch, gts: &[BBox]) -> Vec<usize> {
    gts.iter()
        .enumerate()
        .filter(|(_, g)| contains_center(&patch.footprint, g))
        .map(|(i, _)| i)
        .collect()
}

fn contains_center(fp: &BBox, g: &BBox) -> bool {
    let [x1, y1, x2, y2] = fp.corners();
    let in_x = g.cx >= x1 && (g.cx < x2 || (x2 >= 1.0 && g.cx <= 1.0));
    let in_y = g.cy >= y1 && (g.cy < y2 || (y2 >= 1.0 && g.cy <= 1.0));
    in_x && in_y
}

/// Targets of a patch in the patch's own frame: flipped patches see flipped boxes.
pub fn patch_targets(patch: &Patch, gts: &[BBox]) -> Vec<BBox> {
    let (fh, fv) = patch.kind.flips();
    let frame: Vec<BBox> = gts
        .iter()
        .map(|g| {
            let mut g = *g;
            if fh {
                g = g.flip_h();
            }
            if fv {
                g = g.flip_v();
            }
            g
        })
        .collect();
    targets_in_patch(patch, &frame)
        .into_iter()
        .map(|i| frame[i])
        .collect()
}

/// Boxes smaller than half the patch extent, with the per-box flag.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub small: Vec<bool>,
}

impl GroundTruth {
    /// `patch_extent` is the side of one patch in normalized image units.
    pub fn new(boxes: &[BBox], patch_extent: f32) -> Self {
        Self {
            boxes: boxes.to_vec(),
            small: boxes
                .iter()
                .map(|b| b.max_side() < 0.5 * patch_extent)
                .collect(),
        }
    }
}

/// Compressed maps the training patches are cut from.
pub struct TrainingMaps<'a> {
    /// Downsampled P5 (`S x S`), a single full-image patch.
    pub p6: &'a FeatureMap,
    /// Interpolated P5 (`2S x 2S`).
    pub p5: &'a FeatureMap,
    /// Probed levels, finest last (P4, P3, ...).
    pub probed: Vec<&'a FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPatches {
    pub level: u8,
    pub patches: Vec<Patch>,
}

/// Greedy grouping of small boxes into patches: seed at the first ungrouped
/// center, absorb every small box whose center falls in that footprint.
pub fn gt_patches(map: &FeatureMap, gts: &[BBox], size: usize) -> Vec<Patch> {
    let extent = size as f32 / map.width.max(map.height) as f32;
    let gt = GroundTruth::new(gts, extent);
    let mut grouped = vec![false; gts.len()];
    let mut out = Vec::new();
    for i in 0..gts.len() {
        if !gt.small[i] || grouped[i] {
            continue;
        }
        let center = map.cell_of(gts[i].cx, gts[i].cy);
        let patch = Patch::from_window(map, centered_origin(center, size), size, PatchKind::Gt);
        grouped[i] = true;
        for j in i + 1..gts.len() {
            if gt.small[j] && !grouped[j] && contains_center(&patch.footprint, &gts[j]) {
                grouped[j] = true;
            }
        }
        out.push(patch);
    }
    out
}

fn fill_level(
    map: &FeatureMap,
    mut patches: Vec<Patch>,
    gts: &[BBox],
    size: usize,
    n_tp: usize,
    rng: &mut SplitMix64,
) -> Vec<Patch> {
    if patches.len() < n_tp {
        for p in gt_patches(map, gts, size) {
            if patches.len() >= n_tp {
                break;
            }
            patches.push(p);
        }
    }
    while patches.len() < n_tp {
        let row = rng.below(map.height) as i32;
        let col = rng.below(map.width) as i32;
        patches.push(Patch::from_window(
            map,
            centered_origin((row, col), size),
            size,
            PatchKind::Random,
        ));
    }
    patches
}

/// Training patches for every level, coarsest first.
///
/// `generated` holds, per level, the patches the generator produced
/// (quadrants at P5, probe patches below). Each level is topped up to
/// `n_tp` with GT patches and then random patches. P6 is its single patch
/// plus the three flips.
pub fn build_training_patches(
    maps: &TrainingMaps,
    generated: &[LevelPatches],
    gts: &[BBox],
    size: usize,
    n_tp: usize,
    seed: u64,
) -> Result<Vec<LevelPatches>> {
    if n_tp == 0 {
        return Err(Error::Config("n_tp must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let gen_for = |level: u8| -> Vec<Patch> {
        generated
            .iter()
            .filter(|lp| lp.level == level)
            .flat_map(|lp| lp.patches.iter().cloned())
            .collect()
    };

    let mut out = Vec::new();
    let base = Patch::from_window(maps.p6, (0, 0), maps.p6.height, PatchKind::FixedP6);
    let p6 = vec![
        base.flipped(PatchKind::FlipH),
        base.flipped(PatchKind::FlipV),
        base.flipped(PatchKind::FlipHv),
    ];
    out.push(LevelPatches {
        level: 6,
        patches: std::iter::once(base).chain(p6).collect(),
    });

    let p5 = fill_level(maps.p5, gen_for(5), gts, size, n_tp, &mut rng);
    out.push(LevelPatches { level: 5, patches: p5 });
    for map in &maps.probed {
        let patches = fill_level(map, gen_for(map.level), gts, size, n_tp, &mut rng);
        out.push(LevelPatches {
            level: map.level,
            patches,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(cost: &CostMatrix) -> f64 {
        // Enumerate injections of the smaller side into the larger.
        let transpose = cost.rows > cost.cols;
        let (n, m) = if transpose {
            (cost.cols, cost.rows)
        } else {
            (cost.rows, cost.cols)
        };
        let at = |i: usize, j: usize| if transpose { cost.at(j, i) } else { cost.at(i, j) };
        fn rec(i: usize, n: usize, m: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, at: &dyn Fn(usize, usize) -> f64) {
            if i == n {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    rec(i + 1, n, m, used, acc + at(i, j), best, at);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, n, m, &mut vec![false; m], 0.0, &mut best, &at);
        best
    }

    #[test]
    fn small_cases() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost(&c), 4.0);

        let c = CostMatrix::from_rows(&[
            vec![0.0, 9.0, 9.0],
            vec![9.0, 0.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ]);
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn rectangular_and_empty() {
        let c = CostMatrix::from_rows(&[vec![3.0], vec![1.0], vec![2.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_rows, vec![0, 2]);
        assert!(a.unmatched_cols.is_empty());

        let c = CostMatrix::from_rows(&[vec![3.0, 1.0, 2.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.unmatched_cols, vec![0, 2]);

        let a = hungarian(&CostMatrix::new(4, 0, vec![])).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_rows.len(), 4);
    }

    #[test]
    fn nan_rejected() {
        let c = CostMatrix::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(matches!(hungarian(&c), Err(Error::NanCost { row: 0, col: 1 })));
    }

    #[test]
    fn matches_brute_force_random() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..200 {
            let r = 1 + rng.below(7);
            let c = 1 + rng.below(7);
            let data = (0..r * c).map(|_| rng.uniform(-3.0, 5.0) as f64).collect();
            let m = CostMatrix::new(r, c, data);
            let a = hungarian(&m).unwrap();
            assert_eq!(a.pairs.len(), r.min(c));
            assert_eq!(a.total_cost(&m), brute_force(&m));
        }
    }

    #[test]
    fn integer_ties_are_deterministic() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let data: Vec<f64> = (0..25).map(|_| rng.below(3) as f64).collect();
            let m = CostMatrix::new(5, 5, data);
            let a = hungarian(&m).unwrap();
            assert_eq!(a, hungarian(&m).unwrap());
            assert_eq!(a.total_cost(&m), brute_force(&m));
        }
    }

    #[test]
    fn match_cost_values() {
        let g = BBox::new(0.4, 0.5, 0.2, 0.3);
        let c = match_cost(&[g], &[1.0], &[g], &MatchCoeffs::default());
        assert!((c.at(0, 0) + 2.0).abs() < 1e-9);
        let c = match_cost(&[g, g], &[0.3, 0.6], &[g], &MatchCoeffs::default());
        assert!(c.at(1, 0) < c.at(0, 0));

        let far = BBox::new(0.9, 0.9, 0.05, 0.05);
        let c = match_cost(&[far, g], &[0.0, 1.0], &[g], &MatchCoeffs::default());
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(1, 0)]);
    }

    fn quadrants() -> Vec<Patch> {
        let map = FeatureMap::zeros(5, 1, 30, 30);
        crate::featpyr::split_quadrants(&map).unwrap().to_vec()
    }

    #[test]
    fn quadrant_targets() {
        let q = quadrants();
        let on_boundary = BBox::new(0.5, 0.5, 0.05, 0.05);
        let hits: Vec<usize> = q
            .iter()
            .enumerate()
            .filter(|(_, p)| !targets_in_patch(p, &[on_boundary]).is_empty())
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hits, vec![3]);

        let gts = [
            BBox::new(0.2, 0.2, 0.1, 0.1),
            BBox::new(0.7, 0.3, 0.1, 0.1),
            BBox::new(0.3, 0.8, 0.1, 0.1),
            BBox::new(0.9, 0.6, 0.1, 0.1),
        ];
        let per: Vec<Vec<usize>> = q.iter().map(|p| targets_in_patch(p, &gts)).collect();
        assert_eq!(per, vec![vec![0], vec![1], vec![2], vec![3]]);

        // A probe-sized footprint covering only part of the image.
        let map = FeatureMap::zeros(4, 1, 30, 30);
        let probe = crate::featpyr::crop_patch(&map, (5, 5), 5);
        let t = targets_in_patch(&probe, &gts);
        assert_eq!(t, vec![0]);
        let outside = BBox::new(0.5, 0.05, 0.02, 0.02);
        assert!(targets_in_patch(&probe, &[outside]).is_empty());

        let p6 = Patch::from_window(&FeatureMap::zeros(6, 1, 15, 15), (0, 0), 15, PatchKind::FixedP6);
        assert_eq!(targets_in_patch(&p6, &gts).len(), 4);
        let edge = BBox::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(targets_in_patch(&p6, &[edge]), vec![0]);
    }

    fn maps() -> (FeatureMap, FeatureMap, FeatureMap, FeatureMap) {
        let mut rng = SplitMix64::new(3);
        let mut m = |level, dim| {
            let n = 2 * dim * dim;
            FeatureMap::from_values(level, 2, dim, dim, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
        };
        (m(6, 15), m(5, 30), m(4, 30), m(3, 60))
    }

    #[test]
    fn fill_rules() {
        let (p6, p5, p4, p3) = maps();
        let tm = TrainingMaps {
            p6: &p6,
            p5: &p5,
            probed: vec![&p4, &p3],
        };
        let out = build_training_patches(&tm, &[], &[], 15, 4, 11).unwrap();
        assert_eq!(out.iter().map(|l| l.level).collect::<Vec<_>>(), vec![6, 5, 4, 3]);
        for lp in &out {
            assert_eq!(lp.patches.len(), 4);
        }
        assert!(out[2].patches.iter().all(|p| p.kind == PatchKind::Random));
        let kinds: Vec<PatchKind> = out[0].patches.iter().map(|p| p.kind).collect();
        assert_eq!(
            kinds,
            vec![PatchKind::FixedP6, PatchKind::FlipH, PatchKind::FlipV, PatchKind::FlipHv]
        );
        assert_eq!(out, build_training_patches(&tm, &[], &[], 15, 4, 11).unwrap());

        let six: Vec<Patch> = (0..6)
            .map(|k| crate::featpyr::crop_patch(&p4, (4 * k, 5), 15))
            .collect();
        let generated = vec![LevelPatches { level: 4, patches: six }];
        let out = build_training_patches(&tm, &generated, &[], 15, 4, 11).unwrap();
        assert_eq!(out[2].patches.len(), 6);
        assert!(out[2].patches.iter().all(|p| p.kind == PatchKind::Probe));
    }

    #[test]
    fn nearby_small_gts_grouped() {
        let (_, _, p4, _) = maps();
        let gts = [
            BBox::new(0.30, 0.30, 0.05, 0.05),
            BBox::new(0.35, 0.32, 0.05, 0.05),
            BBox::new(0.85, 0.85, 0.05, 0.05),
            // Not small at P4 (patch extent 0.5).
            BBox::new(0.6, 0.2, 0.3, 0.3),
        ];
        let ps = gt_patches(&p4, &gts, 15);
        assert_eq!(ps.len(), 2);
        assert_eq!(targets_in_patch(&ps[0], &gts[..2]), vec![0, 1]);
        assert!(ps.iter().all(|p| p.kind == PatchKind::Gt));
    }

    #[test]
    fn flipped_targets_follow_values() {
        let (p6, _, _, _) = maps();
        let base = Patch::from_window(&p6, (0, 0), 15, PatchKind::FixedP6);
        let g = BBox::new(0.2, 0.7, 0.1, 0.2);
        let flipped = base.flipped(PatchKind::FlipHv);
        let t = patch_targets(&flipped, &[g]);
        assert_eq!(t.len(), 1);
        assert!((t[0].cx - 0.8).abs() < 1e-6 && (t[0].cy - 0.3).abs() < 1e-6);
        // The value at the gt's cell moved to the mirrored cell.
        let s = 15;
        let (r, c) = p6.cell_of(g.cx, g.cy);
        let (fr, fc) = (s as i32 - 1 - r, s as i32 - 1 - c);
        assert_eq!(
            base.values[(r as usize) * s + c as usize],
            flipped.values[(fr as usize) * s + fc as usize]
        );
    }

    proptest! {
        #[test]
        fn quadrant_partition(cx in 0.0f32..1.0, cy in 0.0f32..1.0) {
            let q = quadrants();
            let g = BBox::new(cx, cy, 0.01, 0.01);
            let n = q.iter().filter(|p| !targets_in_patch(p, &[g]).is_empty()).count();
            prop_assert_eq!(n, 1);
        }

        #[test]
        fn always_at_least_n_tp(seed in 0u64..1000, n_tp in 1usize..7, n_gt in 0usize..6) {
            let (p6, p5, p4, p3) = maps();
            let tm = TrainingMaps { p6: &p6, p5: &p5, probed: vec![&p4, &p3] };
            let mut rng = SplitMix64::new(seed);
            let gts: Vec<BBox> = (0..n_gt)
                .map(|_| BBox::new(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), 0.04, 0.04))
                .collect();
            let out = build_training_patches(&tm, &[], &gts, 15, n_tp, seed).unwrap();
            prop_assert_eq!(out[0].patches.len(), 4);
            for lp in &out[1..] {
                prop_assert!(lp.patches.len() >= n_tp);
            }
        }
    }
}
