//! Feature maps, patches, and the resampling primitives used by the generator.
//!
//! Values are stored channel-major: `values[c * height * width + row * width + col]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Pyramid level; the map is downsampled by `2^level`.
    pub level: u8,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(level: u8, channels: usize, height: usize, width: usize) -> Self {
        Self {
            level,
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_values(
        level: u8,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "map P{level}: {} values for {channels}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            level,
            channels,
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.values[self.idx(c, row, col)]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Cell containing a normalized point, `floor(p * dim)` clamped into the map.
    pub fn cell_of(&self, x: f32, y: f32) -> (i32, i32) {
        let row = ((y * self.height as f32).floor() as i32).clamp(0, self.height as i32 - 1);
        let col = ((x * self.width as f32).floor() as i32).clamp(0, self.width as i32 - 1);
        (row, col)
    }

    /// `size x size` window with top-left cell `origin`; cells outside the map read as zero.
    pub fn window(&self, origin: (i32, i32), size: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.channels * size * size];
        let (r0, c0) = origin;
        for c in 0..self.channels {
            for i in 0..size {
                let r = r0 + i as i32;
                if r < 0 || r >= self.height as i32 {
                    continue;
                }
                for j in 0..size {
                    let col = c0 + j as i32;
                    if col < 0 || col >= self.width as i32 {
                        continue;
                    }
                    out[(c * size + i) * size + j] = self.at(c, r as usize, col as usize);
                }
            }
        }
        out
    }

    /// Mask of in-map cells for a window, `size * size` entries.
    pub fn window_mask(&self, origin: (i32, i32), size: usize) -> Vec<bool> {
        let mut mask = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                let r = origin.0 + i as i32;
                let c = origin.1 + j as i32;
                mask[i * size + j] =
                    r >= 0 && r < self.height as i32 && c >= 0 && c < self.width as i32;
            }
        }
        mask
    }

    /// Image region covered by a window, unclipped.
    pub fn window_extent(&self, origin: (i32, i32), size: usize) -> BBox {
        let x1 = origin.1 as f32 / self.width as f32;
        let y1 = origin.0 as f32 / self.height as f32;
        let x2 = (origin.1 + size as i32) as f32 / self.width as f32;
        let y2 = (origin.0 + size as i32) as f32 / self.height as f32;
        BBox::from_corners(x1, y1, x2, y2)
    }
}

/// Raw backbone-like feature maps, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<FeatureMap>) -> Self {
        Self { maps }
    }

    pub fn level(&self, level: u8) -> Option<&FeatureMap> {
        self.maps.iter().find(|m| m.level == level)
    }

    pub fn require(&self, level: u8) -> Result<&FeatureMap> {
        self.level(level).ok_or(Error::MissingLevel(level))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    FixedQuadrant,
    FixedP6,
    Probe,
    Gt,
    Random,
    FlipH,
    FlipV,
    FlipHv,
}

impl PatchKind {
    pub fn flips(self) -> (bool, bool) {
        match self {
            PatchKind::FlipH => (true, false),
            PatchKind::FlipV => (false, true),
            PatchKind::FlipHv => (true, true),
            _ => (false, false),
        }
    }
}

/// Fixed-size window of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub level: u8,
    pub size: usize,
    pub channels: usize,
    /// Top-left cell in the source map; negative when zero-padded.
    pub origin: (i32, i32),
    /// In-image region covered by the patch, clipped to the unit square.
    pub footprint: BBox,
    /// Full window region, possibly extending past the image.
    pub extent: BBox,
    pub kind: PatchKind,
    pub values: Vec<f32>,
}

impl Patch {
    pub fn from_window(map: &FeatureMap, origin: (i32, i32), size: usize, kind: PatchKind) -> Self {
        let extent = map.window_extent(origin, size);
        let [x1, y1, x2, y2] = extent.corners();
        let footprint = BBox::from_corners(
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        );
        Self {
            level: map.level,
            size,
            channels: map.channels,
            origin,
            footprint,
            extent,
            kind,
            values: map.window(origin, size),
        }
    }

    /// Mirror the patch values; the footprint of a full-image patch is unchanged.
    pub fn flipped(&self, kind: PatchKind) -> Self {
        let (fh, fv) = kind.flips();
        let s = self.size;
        let mut values = vec![0.0f32; self.values.len()];
        for c in 0..self.channels {
            for i in 0..s {
                let si = if fv { s - 1 - i } else { i };
                for j in 0..s {
                    let sj = if fh { s - 1 - j } else { j };
                    values[(c * s + i) * s + j] = self.values[(c * s + si) * s + sj];
                }
            }
        }
        let mut fp = self.footprint;
        let mut ex = self.extent;
        if fh {
            fp = fp.flip_h();
            ex = ex.flip_h();
        }
        if fv {
            fp = fp.flip_v();
            ex = ex.flip_v();
        }
        Self {
            footprint: fp,
            extent: ex,
            kind,
            values,
            ..self.clone()
        }
    }
}

/// Bilinear resize with the half-pixel (align-corners-false) convention.
pub fn interpolate_bilinear(map: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    assert!(out_h >= 1 && out_w >= 1, "empty interpolation target");
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                let frac = if lo == inp - 1 { 0.0 } else { src - lo as f32 };
                (lo, hi, frac)
            })
            .collect()
    };
    let ty = taps(out_h, map.height);
    let tx = taps(out_w, map.width);
    let mut out = FeatureMap::zeros(map.level, map.channels, out_h, out_w);
    for c in 0..map.channels {
        for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = map.at(c, y0, x0) * (1.0 - lx) + map.at(c, y0, x1) * lx;
                let bot = map.at(c, y1, x0) * (1.0 - lx) + map.at(c, y1, x1) * lx;
                let k = out.idx(c, i, j);
                out.values[k] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

/// 2x2 mean pooling; the result sits one level higher.
pub fn downsample2(map: &FeatureMap) -> Result<FeatureMap> {
    if !map.height.is_multiple_of(2) || !map.width.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "downsample2 needs even dims, got {}x{}",
            map.height, map.width
        )));
    }
    let (h, w) = (map.height / 2, map.width / 2);
    let mut out = FeatureMap::zeros(map.level + 1, map.channels, h, w);
    for c in 0..map.channels {
        for i in 0..h {
            for j in 0..w {
                let s = map.at(c, 2 * i, 2 * j)
                    + map.at(c, 2 * i, 2 * j + 1)
                    + map.at(c, 2 * i + 1, 2 * j)
                    + map.at(c, 2 * i + 1, 2 * j + 1);
                let k = out.idx(c, i, j);
                out.values[k] = 0.25 * s;
            }
        }
    }
    Ok(out)
}

/// Per-cell linear projection (1x1 convolution). `proj` is `c_in x c_out`, row-major.
pub fn compress_channels(map: &FeatureMap, proj: &[f32], bias: &[f32]) -> Result<FeatureMap> {
    let c_in = map.channels;
    let c_out = bias.len();
    if proj.len() != c_in * c_out {
        return Err(Error::Shape(format!(
            "projection has {} weights, expected {c_in}x{c_out}",
            proj.len()
        )));
    }
    let n = map.height * map.width;
    let mut out = FeatureMap::zeros(map.level, c_out, map.height, map.width);
    for (o, &b) in bias.iter().enumerate() {
        out.values[o * n..(o + 1) * n].fill(b);
    }
    for ci in 0..c_in {
        let src = &map.values[ci * n..(ci + 1) * n];
        for o in 0..c_out {
            let wgt = proj[ci * c_out + o];
            if wgt == 0.0 {
                continue;
            }
            let dst = &mut out.values[o * n..(o + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wgt * s;
            }
        }
    }
    Ok(out)
}

/// Four `S x S` patches from a `2S x 2S` map: top-left, top-right, bottom-left, bottom-right.
pub fn split_quadrants(map: &FeatureMap) -> Result<[Patch; 4]> {
    if map.height != map.width || !map.height.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "split_quadrants needs a square 2S map, got {}x{}",
            map.height, map.width
        )));
    }
    let s = map.height / 2;
    let si = s as i32;
    Ok([(0, 0), (0, si), (si, 0), (si, si)]
        .map(|origin| Patch::from_window(map, origin, s, PatchKind::FixedQuadrant)))
}

/// Top-left cell of a `size` window centered on `center`.
pub fn centered_origin(center: (i32, i32), size: usize) -> (i32, i32) {
    let half = ((size - 1) / 2) as i32;
    (center.0 - half, center.1 - half)
}

/// `size x size` window centered at a cell; out-of-map cells are zero.
pub fn crop_patch(map: &FeatureMap, center: (i32, i32), size: usize) -> Patch {
    assert!(size >= 1, "empty crop");
    Patch::from_window(map, centered_origin(center, size), size, PatchKind::Probe)
}

fn bilinear_at(map: &FeatureMap, c: usize, y: f32, x: f32) -> f32 {
    let (h, w) = (map.height as f32, map.width as f32);
    if y < -1.0 || y > h || x < -1.0 || x > w {
        return 0.0;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= map.height - 1 {
        y0 = map.height - 1;
        y1 = y0;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f32;
    }
    if x0 >= map.width - 1 {
        x0 = map.width - 1;
        x1 = x0;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f32;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    hy * hx * map.at(c, y0, x0)
        + hy * lx * map.at(c, y0, x1)
        + ly * hx * map.at(c, y1, x0)
        + ly * lx * map.at(c, y1, x1)
}

/// RoIAlign with half-cell alignment: each of the `out x out` bins averages
/// `sampling x sampling` bilinear samples at regular offsets. Output is `C x out x out`.
pub fn roi_align(map: &FeatureMap, bbox: &BBox, out: usize, sampling: usize) -> Result<Vec<f32>> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) || !bbox.is_valid() {
        return Err(Error::DegenerateBox(format!("roi {bbox:?}")));
    }
    assert!(out >= 1 && sampling >= 1);
    let [x1, y1, x2, y2] = bbox.corners();
    // Continuous map coordinates where integer + 0.5 is a cell center.
    let (sx1, sy1) = (x1 * map.width as f32 - 0.5, y1 * map.height as f32 - 0.5);
    let bin_w = (x2 - x1) * map.width as f32 / out as f32;
    let bin_h = (y2 - y1) * map.height as f32 / out as f32;
    let norm = 1.0 / (sampling * sampling) as f32;
    let mut result = vec![0.0f32; map.channels * out * out];
    for c in 0..map.channels {
        for i in 0..out {
            for j in 0..out {
                let mut acc = 0.0f32;
                for si in 0..sampling {
                    let y = sy1 + i as f32 * bin_h + (si as f32 + 0.5) * bin_h / sampling as f32;
                    for sj in 0..sampling {
                        let x =
                            sx1 + j as f32 * bin_w + (sj as f32 + 0.5) * bin_w / sampling as f32;
                        acc += bilinear_at(map, c, y, x);
                    }
                }
                result[(c * out + i) * out + j] = acc * norm;
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_map(level: u8, c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = SplitMix64::new(seed);
        let values = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        FeatureMap::from_values(level, c, h, w, values).unwrap()
    }

    fn constant_map(level: u8, c: usize, h: usize, w: usize, v: f32) -> FeatureMap {
        FeatureMap::from_values(level, c, h, w, vec![v; c * h * w]).unwrap()
    }

    /// Independent scalar resampler written directly from the half-pixel formula.
    fn reference_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let coord = |o: usize, out: usize, inp: usize| -> f64 {
            let s = (o as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
            s.clamp(0.0, (inp - 1) as f64)
        };
        let mut out = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let y = coord(i, oh, h);
                let x = coord(j, ow, w);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (y - y0 as f64, x - x0 as f64);
                let v = src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                    + src[y0 * w + x1] * (1.0 - dy) * dx
                    + src[y1 * w + x0] * dy * (1.0 - dx)
                    + src[y1 * w + x1] * dy * dx;
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn interpolate_identity_and_constant() {
        let m = random_map(5, 3, 7, 9, 1);
        let same = interpolate_bilinear(&m, 7, 9);
        for (a, b) in m.values.iter().zip(&same.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let k = constant_map(5, 2, 5, 5, 0.37);
        for (h, w) in [(1, 1), (3, 8), (30, 30)] {
            let r = interpolate_bilinear(&k, h, w);
            assert!(r.values.iter().all(|v| (v - 0.37).abs() < 1e-6));
            assert_eq!(r.level, 5);
        }
    }

    #[test]
    fn interpolate_matches_reference() {
        let m = FeatureMap::from_values(5, 1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = interpolate_bilinear(&m, 4, 4);
        let expect = reference_resize(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        for (a, b) in r.values.iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        // Row 1 of the output samples source row 0.25: 0.25*2 + x-interp.
        assert!((r.values[4 + 1] - (0.5 + 0.25)).abs() < 1e-6);

        let m = random_map(5, 2, 15, 15, 3);
        let r = interpolate_bilinear(&m, 30, 30);
        for c in 0..2 {
            let src: Vec<f64> = m.plane(c).iter().map(|&v| v as f64).collect();
            let expect = reference_resize(&src, 15, 15, 30, 30);
            for (a, b) in r.plane(c).iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn downsample_cases() {
        let m = FeatureMap::from_values(5, 1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let d = downsample2(&m).unwrap();
        assert_eq!(d.values, vec![1.5]);
        assert_eq!(d.level, 6);

        let k = downsample2(&constant_map(5, 2, 4, 6, -0.2)).unwrap();
        assert_eq!((k.height, k.width), (2, 3));
        assert!(k.values.iter().all(|v| (v + 0.2).abs() < 1e-6));

        let ramp: Vec<f32> = (0..900).map(|i| i as f32 * 0.01).collect();
        let m = FeatureMap::from_values(5, 1, 30, 30, ramp.clone()).unwrap();
        let d = downsample2(&m).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let mut s = 0.0f64;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s += ramp[(2 * i + di) * 30 + 2 * j + dj] as f64;
                }
                assert!((d.at(0, i, j) as f64 - s / 4.0).abs() < 1e-5);
            }
        }
        assert!(matches!(
            downsample2(&constant_map(5, 1, 3, 4, 0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn compress_cases() {
        let m = random_map(4, 4, 3, 3, 5);
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let same = compress_channels(&m, &eye, &[0.0; 4]).unwrap();
        assert_eq!(same.values, m.values);

        let zeros = compress_channels(&m, &[0.0; 8], &[0.5, -1.0]).unwrap();
        assert!(zeros.plane(0).iter().all(|&v| v == 0.5));
        assert!(zeros.plane(1).iter().all(|&v| v == -1.0));

        let m = random_map(4, 16, 4, 4, 6);
        let mut rng = SplitMix64::new(8);
        let proj: Vec<f32> = (0..128).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bias: Vec<f32> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let out = compress_channels(&m, &proj, &bias).unwrap();
        for r in 0..4 {
            for col in 0..4 {
                for o in 0..8 {
                    let mut dot = bias[o] as f64;
                    for ci in 0..16 {
                        dot += proj[ci * 8 + o] as f64 * m.at(ci, r, col) as f64;
                    }
                    assert!((out.at(o, r, col) as f64 - dot).abs() < 1e-5);
                }
            }
        }
        assert!(compress_channels(&m, &proj[..100], &bias).is_err());
    }

    #[test]
    fn quadrants_tile_the_map() {
        let vals: Vec<f32> = (0..2 * 30 * 30)
            .map(|k| (((k % 30) + (k / 30)) % 2) as f32)
            .collect();
        let m = FeatureMap::from_values(5, 2, 30, 30, vals).unwrap();
        let quads = split_quadrants(&m).unwrap();
        let fps = [
            [0.0, 0.0, 0.5, 0.5],
            [0.5, 0.0, 1.0, 0.5],
            [0.0, 0.5, 0.5, 1.0],
            [0.5, 0.5, 1.0, 1.0],
        ];
        for (q, (p, fp)) in quads.iter().zip(fps).enumerate() {
            assert_eq!(p.size, 15);
            assert_eq!(p.kind, PatchKind::FixedQuadrant);
            for (a, b) in p.footprint.corners().iter().zip(fp) {
                assert!((a - b).abs() < 1e-6);
            }
            let (r0, c0) = ((q / 2) * 15, (q % 2) * 15);
            for c in 0..2 {
                for i in 0..15 {
                    for j in 0..15 {
                        assert_eq!(p.values[(c * 15 + i) * 15 + j], m.at(c, r0 + i, c0 + j));
                    }
                }
            }
        }
        let small = split_quadrants(&random_map(5, 1, 24, 24, 2)).unwrap();
        assert!(small.iter().all(|p| p.size == 12 && p.values.len() == 144));
        assert!(split_quadrants(&random_map(5, 1, 24, 30, 2)).is_err());
    }

    #[test]
    fn crop_cases() {
        let m = random_map(4, 2, 30, 30, 11);
        let p = crop_patch(&m, (15, 12), 5);
        assert_eq!(p.origin, (13, 10));
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(p.values[(c * 5 + i) * 5 + j], m.at(c, 13 + i, 10 + j));
                }
            }
        }
        let corner = crop_patch(&m, (0, 0), 15);
        assert_eq!(corner.origin, (-7, -7));
        assert_eq!(corner.values.len(), 2 * 225);
        assert_eq!(corner.values[0], 0.0);
        assert_eq!(corner.values[7 * 15 + 7], m.at(0, 0, 0));
        let [x1, y1, x2, y2] = corner.footprint.corners();
        assert!(x1.abs() < 1e-6 && y1.abs() < 1e-6);
        assert!((x2 - 8.0 / 30.0).abs() < 1e-6 && (y2 - 8.0 / 30.0).abs() < 1e-6);

        let ones = constant_map(3, 3, 60, 60, 1.0);
        let p = crop_patch(&ones, (30, 30), 15);
        assert!(p.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn crop_translation_invariance() {
        // Columns repeat with period 1 along rows: a map constant along rows and columns shifted.
        let mut rng = SplitMix64::new(4);
        let row: Vec<f32> = (0..40).map(|_| rng.next_f32()).collect();
        let mut vals = Vec::new();
        for _ in 0..40 {
            vals.extend_from_slice(&row);
        }
        let m = FeatureMap::from_values(3, 1, 40, 40, vals).unwrap();
        let a = crop_patch(&m, (10, 20), 7);
        let b = crop_patch(&m, (25, 20), 7);
        assert_eq!(a.values, b.values);
    }

    /// Straight-line RoIAlign used as an oracle.
    fn reference_roi(map: &FeatureMap, b: &BBox, out: usize, sr: usize) -> Vec<f64> {
        let sample = |c: usize, y: f64, x: f64| -> f64 {
            let (h, w) = (map.height as f64, map.width as f64);
            if y < -1.0 || y > h || x < -1.0 || x > w {
                return 0.0;
            }
            let y = y.clamp(0.0, h - 1.0);
            let x = x.clamp(0.0, w - 1.0);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(map.height - 1), (x0 + 1).min(map.width - 1));
            let (dy, dx) = (y - y0 as f64, x - x0 as f64);
            map.at(c, y0, x0) as f64 * (1.0 - dy) * (1.0 - dx)
                + map.at(c, y0, x1) as f64 * (1.0 - dy) * dx
                + map.at(c, y1, x0) as f64 * dy * (1.0 - dx)
                + map.at(c, y1, x1) as f64 * dy * dx
        };
        let x1 = (b.cx - b.w / 2.0) as f64 * map.width as f64 - 0.5;
        let y1 = (b.cy - b.h / 2.0) as f64 * map.height as f64 - 0.5;
        let bw = b.w as f64 * map.width as f64 / out as f64;
        let bh = b.h as f64 * map.height as f64 / out as f64;
        let mut res = Vec::new();
        for c in 0..map.channels {
            for i in 0..out {
                for j in 0..out {
                    let mut acc = 0.0;
                    for a in 0..sr {
                        for bb in 0..sr {
                            let y = y1 + bh * (i as f64 + (a as f64 + 0.5) / sr as f64);
                            let x = x1 + bw * (j as f64 + (bb as f64 + 0.5) / sr as f64);
                            acc += sample(c, y, x);
                        }
                    }
                    res.push(acc / (sr * sr) as f64);
                }
            }
        }
        res
    }

    #[test]
    fn roi_align_cases() {
        let k = constant_map(5, 3, 15, 15, 2.5);
        let out = roi_align(&k, &BBox::new(0.3, 0.6, 0.2, 0.5), 7, 2).unwrap();
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-5));

        let m = random_map(5, 2, 15, 15, 21);
        let full = roi_align(&m, &BBox::new(0.5, 0.5, 1.0, 1.0), 15, 1).unwrap();
        for c in 0..2 {
            for i in 1..14 {
                for j in 1..14 {
                    assert!((full[(c * 15 + i) * 15 + j] - m.at(c, i, j)).abs() < 1e-5);
                }
            }
        }

        let mut rng = SplitMix64::new(99);
        for _ in 0..20 {
            let b = BBox::new(
                rng.uniform(0.1, 0.9),
                rng.uniform(0.1, 0.9),
                rng.uniform(0.05, 0.6),
                rng.uniform(0.05, 0.6),
            );
            let got = roi_align(&m, &b, 7, 2).unwrap();
            let want = reference_roi(&m, &b, 7, 2);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5);
            }
        }
        assert!(matches!(
            roi_align(&m, &BBox::new(0.5, 0.5, 0.0, 0.2), 7, 2),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn flips_mirror_values() {
        let m = random_map(6, 2, 5, 5, 13);
        let p = Patch::from_window(&m, (0, 0), 5, PatchKind::FixedP6);
        let h = p.flipped(PatchKind::FlipH);
        let hv = p.flipped(PatchKind::FlipHv);
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let v = p.values[(c * 5 + i) * 5 + j];
                    assert_eq!(h.values[(c * 5 + i) * 5 + 4 - j], v);
                    assert_eq!(hv.values[(c * 5 + 4 - i) * 5 + 4 - j], v);
                }
            }
        }
        assert_eq!(h.footprint, p.footprint);
    }
}
