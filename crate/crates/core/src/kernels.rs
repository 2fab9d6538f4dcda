//! Structured differentiable operations: corner pooling, bilinear point
//! sampling and detached feature fusion.

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::targets::CornerKind;
use crate::tensor::Tensor;

/// Argmax positions recorded by [`corner_pool`] for the backward pass.
///
/// For every output cell, `row_arg` is the column index that won the
/// horizontal scan and `col_arg` the row index that won the vertical scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolRecord {
    pub kind: CornerKind,
    pub height: usize,
    pub width: usize,
    pub row_arg: Vec<u32>,
    pub col_arg: Vec<u32>,
}

fn plane_dims(grid: &Tensor) -> (usize, usize, usize) {
    let s = grid.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (grid.len() / (h * w).max(1), h, w)
}

/// Directional max pooling over every trailing `H x W` plane.
///
/// Top-left: `out(i,j) = max_{k>=j} x(i,k) + max_{k>=i} x(k,j)`.
/// Bottom-right mirrors this with `k <= j`, `k <= i`. Ties go to the
/// smallest index.
pub fn corner_pool(grid: &Tensor, kind: CornerKind) -> (Tensor, PoolRecord) {
    assert!(grid.shape().len() >= 2, "corner_pool needs at least a 2-d grid");
    let (planes, h, w) = plane_dims(grid);
    let mut out = Tensor::zeros(grid.shape());
    let mut row_arg = vec![0u32; grid.len()];
    let mut col_arg = vec![0u32; grid.len()];
    let x = grid.data();
    for p in 0..planes {
        let base = p * h * w;
        let src = &x[base..base + h * w];
        let dst = &mut out.data_mut()[base..base + h * w];
        let ra = &mut row_arg[base..base + h * w];
        let ca = &mut col_arg[base..base + h * w];
        match kind {
            CornerKind::TopLeft => {
                for i in 0..h {
                    let mut best = (w - 1, src[i * w + w - 1]);
                    for j in (0..w).rev() {
                        let v = src[i * w + j];
                        if v >= best.1 {
                            best = (j, v);
                        }
                        dst[i * w + j] = best.1;
                        ra[i * w + j] = best.0 as u32;
                    }
                }
                for j in 0..w {
                    let mut best = (h - 1, src[(h - 1) * w + j]);
                    for i in (0..h).rev() {
                        let v = src[i * w + j];
                        if v >= best.1 {
                            best = (i, v);
                        }
                        dst[i * w + j] += best.1;
                        ca[i * w + j] = best.0 as u32;
                    }
                }
            }
            CornerKind::BottomRight => {
                for i in 0..h {
                    let mut best = (0, src[i * w]);
                    for j in 0..w {
                        let v = src[i * w + j];
                        if v > best.1 {
                            best = (j, v);
                        }
                        dst[i * w + j] = best.1;
                        ra[i * w + j] = best.0 as u32;
                    }
                }
                for j in 0..w {
                    let mut best = (0, src[j]);
                    for i in 0..h {
                        let v = src[i * w + j];
                        if v > best.1 {
                            best = (i, v);
                        }
                        dst[i * w + j] += best.1;
                        ca[i * w + j] = best.0 as u32;
                    }
                }
            }
        }
    }
    (
        out,
        PoolRecord {
            kind,
            height: h,
            width: w,
            row_arg,
            col_arg,
        },
    )
}

/// Routes each upstream value to its row-scan and column-scan argmax.
pub fn corner_pool_backward(upstream: &Tensor, rec: &PoolRecord) -> Tensor {
    let (h, w) = (rec.height, rec.width);
    let planes = upstream.len() / (h * w);
    let mut grad = Tensor::zeros(upstream.shape());
    let g = upstream.data();
    let out = grad.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let k = base + i * w + j;
                out[base + i * w + rec.row_arg[k] as usize] += g[k];
                out[base + rec.col_arg[k] as usize * w + j] += g[k];
            }
        }
    }
    grad
}

/// Four-neighbour interpolation stencil at a point, clamped to the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bilinear {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the point moved freely along each axis (false when clamped).
    pub free_x: bool,
    pub free_y: bool,
}

impl Bilinear {
    /// `p` is in cell units: integer coordinates are cell centers.
    pub fn at(p: Point2, height: usize, width: usize) -> Self {
        let axis = |v: f64, n: usize| -> (usize, usize, f64, bool) {
            let hi = (n - 1) as f64;
            let free = v > 0.0 && v < hi;
            let c = v.clamp(0.0, hi);
            if n == 1 {
                return (0, 0, 0.0, false);
            }
            let i0 = (c.floor() as usize).min(n - 2);
            (i0, i0 + 1, c - i0 as f64, free)
        };
        let (x0, x1, fx, free_x) = axis(p.x, width);
        let (y0, y1, fy, free_y) = axis(p.y, height);
        Self {
            x0,
            y0,
            x1,
            y1,
            fx,
            fy,
            free_x,
            free_y,
        }
    }

    /// `(row, col, weight)` for the four neighbours.
    pub fn taps(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0, self.x1, fx * (1.0 - fy)),
            (self.y1, self.x0, (1.0 - fx) * fy),
            (self.y1, self.x1, fx * fy),
        ]
    }

    /// Interpolates one plane given as a row-major slice.
    pub fn sample(&self, plane: &[f64], width: usize) -> f64 {
        self.taps().iter().map(|&(r, c, wt)| wt * plane[r * width + c]).sum()
    }

    /// Partial derivatives of the sampled value with respect to `(x, y)`.
    pub fn point_grad(&self, plane: &[f64], width: usize) -> (f64, f64) {
        let v = |r: usize, c: usize| plane[r * width + c];
        let (fx, fy) = (self.fx, self.fy);
        let dx = if self.free_x {
            (1.0 - fy) * (v(self.y0, self.x1) - v(self.y0, self.x0)) + fy * (v(self.y1, self.x1) - v(self.y1, self.x0))
        } else {
            0.0
        };
        let dy = if self.free_y {
            (1.0 - fx) * (v(self.y1, self.x0) - v(self.y0, self.x0)) + fx * (v(self.y1, self.x1) - v(self.y0, self.x1))
        } else {
            0.0
        };
        (dx, dy)
    }
}

/// Samples every channel of a `[C, H, W]` grid at `p` (cell units).
pub fn bilinear_sample(grid: &Tensor, p: Point2) -> Vec<f64> {
    let s = grid.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let b = Bilinear::at(p, h, w);
    (0..c)
        .map(|ch| b.sample(&grid.data()[ch * h * w..(ch + 1) * h * w], w))
        .collect()
}

/// Gradients of `sum_c upstream[c] * sample(grid, p)[c]` with respect to the grid and `p`.
pub fn bilinear_sample_backward(grid: &Tensor, p: Point2, upstream: &[f64]) -> (Tensor, Point2) {
    let s = grid.shape();
    let (h, w) = (s[1], s[2]);
    let b = Bilinear::at(p, h, w);
    let mut dgrid = Tensor::zeros(s);
    let mut dp = Point2::default();
    for (ch, &u) in upstream.iter().enumerate() {
        let plane = &grid.data()[ch * h * w..(ch + 1) * h * w];
        for (r, c, wt) in b.taps() {
            dgrid.data_mut()[ch * h * w + r * w + c] += u * wt;
        }
        let (dx, dy) = b.point_grad(plane, w);
        dp.x += u * dx;
        dp.y += u * dy;
    }
    (dgrid, dp)
}

/// 1x1 projection `[feature_channels, verification_channels]`, without bias,
/// shared by every pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionEmbed {
    pub weight: Tensor,
}

impl FusionEmbed {
    pub fn zeros(feature_channels: usize, verification_channels: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[feature_channels, verification_channels]),
        }
    }

    fn project_into(&self, v: &Tensor, out: &mut Tensor) {
        let (co, ci) = (self.weight.shape()[0], self.weight.shape()[1]);
        let hw = v.len() / ci;
        let w = self.weight.data();
        let src = v.data();
        let dst = out.data_mut();
        for o in 0..co {
            for i in 0..ci {
                let wt = w[o * ci + i];
                if wt == 0.0 {
                    continue;
                }
                for k in 0..hw {
                    dst[o * hw + k] += wt * src[i * hw + k];
                }
            }
        }
    }
}

fn check_fusion(feature: &Tensor, outputs: &[Tensor], embeds: &[FusionEmbed]) -> Result<()> {
    if outputs.len() != embeds.len() {
        return Err(Error::invalid(format!(
            "{} verification outputs but {} embeddings",
            outputs.len(),
            embeds.len()
        )));
    }
    let fs = feature.shape();
    for (v, e) in outputs.iter().zip(embeds) {
        let vs = v.shape();
        if vs.len() != 3 || vs[1..] != fs[1..] {
            return Err(Error::ShapeMismatch {
                context: "fusion spatial dims",
                expected: fs.to_vec(),
                got: vs.to_vec(),
            });
        }
        if e.weight.shape() != [fs[0], vs[0]] {
            return Err(Error::ShapeMismatch {
                context: "fusion embedding",
                expected: vec![fs[0], vs[0]],
                got: e.weight.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `feature + sum_k embed_k(detach(output_k))` on `[C, H, W]` grids.
pub fn fuse_features(feature: &Tensor, outputs: &[Tensor], embeds: &[FusionEmbed]) -> Result<Tensor> {
    check_fusion(feature, outputs, embeds)?;
    let mut out = feature.clone();
    for (v, e) in outputs.iter().zip(embeds) {
        e.project_into(v, &mut out);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrads {
    pub feature: Tensor,
    pub embeds: Vec<Tensor>,
    /// Always zero: the verification outputs enter detached.
    pub outputs: Vec<Tensor>,
}

pub fn fuse_features_backward(
    upstream: &Tensor,
    outputs: &[Tensor],
    embeds: &[FusionEmbed],
) -> Result<FusionGrads> {
    check_fusion(upstream, outputs, embeds)?;
    let fs = upstream.shape();
    let hw = fs[1] * fs[2];
    let mut embed_grads = Vec::with_capacity(embeds.len());
    for v in outputs {
        let ci = v.shape()[0];
        let mut g = Tensor::zeros(&[fs[0], ci]);
        for o in 0..fs[0] {
            let up = &upstream.data()[o * hw..(o + 1) * hw];
            for i in 0..ci {
                let src = &v.data()[i * hw..(i + 1) * hw];
                g.data_mut()[o * ci + i] = up.iter().zip(src).map(|(a, b)| a * b).sum();
            }
        }
        embed_grads.push(g);
    }
    Ok(FusionGrads {
        feature: upstream.clone(),
        embeds: embed_grads,
        outputs: outputs.iter().map(|v| Tensor::zeros(v.shape())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn brute_corner_pool(grid: &Tensor, kind: CornerKind) -> Tensor {
        let (h, w) = (grid.shape()[0], grid.shape()[1]);
        let mut out = Tensor::zeros(&[h, w]);
        for i in 0..h {
            for j in 0..w {
                let (cols, rows): (Vec<usize>, Vec<usize>) = match kind {
                    CornerKind::TopLeft => ((j..w).collect(), (i..h).collect()),
                    CornerKind::BottomRight => ((0..=j).collect(), (0..=i).collect()),
                };
                let a = cols.iter().map(|&k| grid.at(&[i, k])).fold(f64::NEG_INFINITY, f64::max);
                let b = rows.iter().map(|&k| grid.at(&[k, j])).fold(f64::NEG_INFINITY, f64::max);
                *out.at_mut(&[i, j]) = a + b;
            }
        }
        out
    }

    #[test]
    fn constant_and_single_cell() {
        let g = Tensor::full(&[3, 4], 1.5);
        for kind in CornerKind::ALL {
            assert!(corner_pool(&g, kind).0.data().iter().all(|&v| v == 3.0));
        }
        let one = Tensor::full(&[1, 1], -2.0);
        assert_eq!(corner_pool(&one, CornerKind::TopLeft).0.data(), &[-4.0]);
    }

    #[test]
    fn decreasing_row_routes_to_self() {
        let g = Tensor::from_vec(&[1, 4], vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let (_, rec) = corner_pool(&g, CornerKind::TopLeft);
        assert_eq!(rec.row_arg, vec![0, 1, 2, 3]);
        let grad = corner_pool_backward(&Tensor::full(&[1, 4], 1.0), &rec);
        // one unit from the row scan and one from the (single-row) column scan
        assert_eq!(grad.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn ties_route_to_first_occurrence() {
        let g = Tensor::full(&[2, 3], 0.0);
        let (_, a) = corner_pool(&g, CornerKind::TopLeft);
        let (_, b) = corner_pool(&g, CornerKind::TopLeft);
        assert_eq!(a, b);
        assert_eq!(a.row_arg, vec![0, 1, 2, 0, 1, 2]);
        let (_, br) = corner_pool(&g, CornerKind::BottomRight);
        assert_eq!(br.row_arg, vec![0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn bilinear_basics() {
        let g = Tensor::from_vec(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&g, Point2::new(0.0, 0.0)), vec![1.0]);
        assert_eq!(bilinear_sample(&g, Point2::new(1.0, 0.0)), vec![3.0]);
        assert_eq!(bilinear_sample(&g, Point2::new(0.5, 0.0)), vec![2.0]);
        // clamped outside
        assert_eq!(bilinear_sample(&g, Point2::new(7.0, -3.0)), vec![3.0]);
    }

    #[test]
    fn fusion_identity_and_scalar_case() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let zero = FusionEmbed::zeros(1, 1);
        assert_eq!(fuse_features(&f, std::slice::from_ref(&v), std::slice::from_ref(&zero)).unwrap(), f);
        let e = FusionEmbed {
            weight: Tensor::full(&[1, 1], 2.0),
        };
        let out = fuse_features(&f, std::slice::from_ref(&v), std::slice::from_ref(&e)).unwrap();
        for k in 0..4 {
            assert!((out.data()[k] - (f.data()[k] + 2.0 * v.data()[k])).abs() < 1e-15);
        }
        let g = fuse_features_backward(&Tensor::full(&[1, 2, 2], 1.0), &[v], &[e]).unwrap();
        assert!(g.outputs[0].data().iter().all(|&x| x == 0.0));
        assert!((g.embeds[0].data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_spatial_mismatch() {
        let f = Tensor::zeros(&[2, 3, 3]);
        let v = Tensor::zeros(&[1, 2, 3]);
        assert!(fuse_features(&f, &[v], &[FusionEmbed::zeros(2, 1)]).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = Tensor> {
        (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
            prop::collection::vec(-5.0..5.0f64, h * w).prop_map(move |v| Tensor::from_vec(&[h, w], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pool_matches_brute_force(g in arb_grid()) {
            for kind in CornerKind::ALL {
                prop_assert_eq!(corner_pool(&g, kind).0, brute_corner_pool(&g, kind));
            }
        }

        #[test]
        fn pool_is_monotone(g in arb_grid(), idx in 0usize..49, bump in 0.0..3.0f64) {
            let k = idx % g.len();
            let mut raised = g.clone();
            raised.data_mut()[k] += bump;
            for kind in CornerKind::ALL {
                let (a, _) = corner_pool(&g, kind);
                let (b, _) = corner_pool(&raised, kind);
                for (u, v) in a.data().iter().zip(b.data()) {
                    prop_assert!(v >= u);
                }
            }
        }

        #[test]
        fn bilinear_is_linear_along_axes(v in prop::collection::vec(-3.0..3.0f64, 12), t in 0.0..1.0f64, row in 0usize..3) {
            let g = Tensor::from_vec(&[1, 3, 4], v).unwrap();
            let a = bilinear_sample(&g, Point2::new(1.0, row as f64))[0];
            let b = bilinear_sample(&g, Point2::new(2.0, row as f64))[0];
            let m = bilinear_sample(&g, Point2::new(1.0 + t, row as f64))[0];
            prop_assert!((m - (a + t * (b - a))).abs() < 1e-12);
        }
    }
}
