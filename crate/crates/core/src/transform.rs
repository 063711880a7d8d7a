//! Affine estimation from match points, triangulated locally-affine meshes,
//! texture-mapped rendering, and spline bridging of failed section spans.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlate::MatchPoint;
use crate::error::{Error, Result};
use crate::image::Image;

/// 2x3 planar affine mapping (x, y) to
/// (a11*x + a12*y + tx, a21*x + a22*y + ty).
///
/// Serialized as the 6 reals [a11, a12, tx, a21, a22, ty].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl From<[f64; 6]> for AffineTransform {
    fn from(v: [f64; 6]) -> Self {
        AffineTransform {
            a11: v[0],
            a12: v[1],
            tx: v[2],
            a21: v[3],
            a22: v[4],
            ty: v[5],
        }
    }
}

impl From<AffineTransform> for [f64; 6] {
    fn from(t: AffineTransform) -> Self {
        [t.a11, t.a12, t.tx, t.a21, t.a22, t.ty]
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            a11: 1.0,
            a12: 0.0,
            a21: 0.0,
            a22: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            tx,
            ty,
            ..AffineTransform::identity()
        }
    }

    /// Rotation (radians, counterclockwise), isotropic scale, shear and
    /// translation about the given center point.
    pub fn similarity_about(
        center: (f64, f64),
        rotation: f64,
        scale: f64,
        shear: f64,
        tx: f64,
        ty: f64,
    ) -> Self {
        let (s, c) = rotation.sin_cos();
        // linear part: scale * rotation * x-shear
        let l11 = scale * c;
        let l12 = scale * (c * shear - s);
        let l21 = scale * s;
        let l22 = scale * (s * shear + c);
        let (cx, cy) = center;
        AffineTransform {
            a11: l11,
            a12: l12,
            a21: l21,
            a22: l22,
            tx: cx - (l11 * cx + l12 * cy) + tx,
            ty: cy - (l21 * cx + l22 * cy) + ty,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )
    }

    #[inline]
    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    /// `a.compose(&b)` applies `b` first, then `a`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a11: self.a11 * other.a11 + self.a12 * other.a21,
            a12: self.a11 * other.a12 + self.a12 * other.a22,
            a21: self.a21 * other.a11 + self.a22 * other.a21,
            a22: self.a21 * other.a12 + self.a22 * other.a22,
            tx: self.a11 * other.tx + self.a12 * other.ty + self.tx,
            ty: self.a21 * other.tx + self.a22 * other.ty + self.ty,
        }
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.det();
        if det.abs() <= 1e-6 {
            return Err(Error::SingularTransform(det.abs()));
        }
        let inv = 1.0 / det;
        let a11 = self.a22 * inv;
        let a12 = -self.a12 * inv;
        let a21 = -self.a21 * inv;
        let a22 = self.a11 * inv;
        Ok(AffineTransform {
            a11,
            a12,
            a21,
            a22,
            tx: -(a11 * self.tx + a12 * self.ty),
            ty: -(a21 * self.tx + a22 * self.ty),
        })
    }

    pub fn params(&self) -> [f64; 6] {
        (*self).into()
    }
}

/// Least-squares weighting mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    Snr,
}

/// Solved affine plus per-point residuals for diagnostics.
#[derive(Debug, Clone)]
pub struct AffineFit {
    /// Maps match centers to centers + offsets.
    pub transform: AffineTransform,
    /// (rx, ry) per valid input point, in input order.
    pub residuals: Vec<(f64, f64)>,
    pub rms: f64,
}

/// Weighted linear least squares fit of the 6 affine parameters to the valid
/// match points, minimizing sum w_i * |A(center_i) - (center_i + offset_i)|^2.
/// Coordinates are centered on the weighted centroid before solving so the
/// conditioning check reflects point geometry rather than absolute position.
pub fn solve_affine(points: &[MatchPoint], weighting: Weighting) -> Result<AffineFit> {
    let valid: Vec<&MatchPoint> = points.iter().filter(|p| p.result.valid).collect();
    if valid.len() < 3 {
        return Err(Error::TooFewPoints(valid.len()));
    }
    let weights: Vec<f64> = valid
        .iter()
        .map(|p| match weighting {
            Weighting::None => 1.0,
            Weighting::Snr => p.result.snr.max(0.0),
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::TooFewPoints(0));
    }

    let mut sc = (0.0, 0.0);
    let mut dc = (0.0, 0.0);
    for (p, &w) in valid.iter().zip(&weights) {
        sc.0 += w * p.cx;
        sc.1 += w * p.cy;
        dc.0 += w * (p.cx + p.result.dx);
        dc.1 += w * (p.cy + p.result.dy);
    }
    sc = (sc.0 / wsum, sc.1 / wsum);
    dc = (dc.0 / wsum, dc.1 / wsum);

    let mut m = Matrix3::zeros();
    let mut rhs_x = Vector3::zeros();
    let mut rhs_y = Vector3::zeros();
    for (p, &w) in valid.iter().zip(&weights) {
        let phi = Vector3::new(p.cx - sc.0, p.cy - sc.1, 1.0);
        m += w * phi * phi.transpose();
        rhs_x += w * (p.cx + p.result.dx - dc.0) * phi;
        rhs_y += w * (p.cy + p.result.dy - dc.1) * phi;
    }

    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e8 {
        return Err(Error::IllConditioned(cond));
    }
    let sol_x = svd.solve(&rhs_x, 0.0).map_err(|_| Error::IllConditioned(cond))?;
    let sol_y = svd.solve(&rhs_y, 0.0).map_err(|_| Error::IllConditioned(cond))?;

    // Un-center: dst = L*(src - sc) + t_c + dc
    let (a11, a12, tcx) = (sol_x[0], sol_x[1], sol_x[2]);
    let (a21, a22, tcy) = (sol_y[0], sol_y[1], sol_y[2]);
    let transform = AffineTransform {
        a11,
        a12,
        a21,
        a22,
        tx: dc.0 + tcx - (a11 * sc.0 + a12 * sc.1),
        ty: dc.1 + tcy - (a21 * sc.0 + a22 * sc.1),
    };

    let residuals: Vec<(f64, f64)> = valid
        .iter()
        .map(|p| {
            let (mx, my) = transform.apply(p.cx, p.cy);
            (mx - (p.cx + p.result.dx), my - (p.cy + p.result.dy))
        })
        .collect();
    let rms = (residuals.iter().map(|r| r.0 * r.0 + r.1 * r.1).sum::<f64>()
        / residuals.len() as f64)
        .sqrt();
    Ok(AffineFit {
        transform,
        residuals,
        rms,
    })
}

/// Axis-aligned section rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn of_image(img: &Image) -> Self {
        Rect {
            x: 0.0,
            y: 0.0,
            width: img.width as f64,
            height: img.height as f64,
        }
    }
}

/// Rectangular-grid triangulation with one locally affine map per triangle.
///
/// Control points grid the section rectangle (the output frame); each cell is
/// split along its upper-left to lower-right diagonal into triangle A
/// (UL, UR, LR) and triangle B (UL, LR, LL), indexed 2*(row*cols + col) and
/// +1. Each triangle's `to_source` affine maps grid coordinates to source
/// image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub rect: Rect,
    pub rows: usize,
    pub cols: usize,
    /// (rows+1) x (cols+1) control points, row-major.
    pub grid: Vec<(f64, f64)>,
    /// Vertex indices into `grid`, two triangles per cell.
    pub triangles: Vec<[usize; 3]>,
    /// Per-triangle affine mapping output coordinates to source coordinates.
    pub to_source: Vec<AffineTransform>,
    /// Triangles whose support was too sparse and inherited the
    /// whole-section affine.
    pub fallback: Vec<bool>,
}

fn signed_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1))
}

impl TriangleMesh {
    pub fn vertex(&self, t: usize, k: usize) -> (f64, f64) {
        self.grid[self.triangles[t][k]]
    }

    fn centroid(&self, t: usize) -> (f64, f64) {
        let (a, b, c) = (self.vertex(t, 0), self.vertex(t, 1), self.vertex(t, 2));
        ((a.0 + b.0 + c.0) / 3.0, (a.1 + b.1 + c.1) / 3.0)
    }

    /// Index of the triangle containing (x, y); points on the diagonal go to
    /// the lower-index (A) triangle, points outside the rectangle clamp to
    /// the nearest cell.
    pub fn locate(&self, x: f64, y: f64) -> usize {
        let cw = self.rect.width / self.cols as f64;
        let ch = self.rect.height / self.rows as f64;
        let fx = (x - self.rect.x) / cw;
        let fy = (y - self.rect.y) / ch;
        let col = (fx.floor() as i64).clamp(0, self.cols as i64 - 1) as usize;
        let row = (fy.floor() as i64).clamp(0, self.rows as i64 - 1) as usize;
        let u = fx - col as f64;
        let v = fy - row as f64;
        let base = 2 * (row * self.cols + col);
        // Diagonal runs UL -> LR (u == v); triangle A is the upper-right half.
        if v <= u {
            base
        } else {
            base + 1
        }
    }

    /// Checks that every triangle is non-degenerate and that the mapped mesh
    /// preserves orientation (no fold-overs).
    pub fn validate(&self) -> Result<()> {
        for (t, tri) in self.triangles.iter().enumerate() {
            let src = signed_area(self.grid[tri[0]], self.grid[tri[1]], self.grid[tri[2]]);
            if src.abs() <= f64::EPSILON {
                return Err(Error::DegenerateTriangle(t));
            }
            let m = &self.to_source[t];
            let mapped = signed_area(
                m.apply(self.grid[tri[0]].0, self.grid[tri[0]].1),
                m.apply(self.grid[tri[1]].0, self.grid[tri[1]].1),
                m.apply(self.grid[tri[2]].0, self.grid[tri[2]].1),
            );
            if mapped.abs() <= f64::EPSILON {
                return Err(Error::DegenerateTriangle(t));
            }
            if mapped.signum() != src.signum() {
                return Err(Error::MeshFoldOver(t));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let d1 = signed_area(p, a, b);
    let d2 = signed_area(p, b, c);
    let d3 = signed_area(p, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Builds a triangulated mesh whose per-triangle affines are solved from the
/// match points inside each triangle plus a surrounding band of up to six
/// vertex-adjacent triangles. Triangles whose support set is still too
/// sparse or degenerate inherit the whole-section affine and are flagged in
/// `fallback`.
pub fn build_mesh(
    rect: Rect,
    rows: usize,
    cols: usize,
    points: &[MatchPoint],
) -> Result<TriangleMesh> {
    assert!(rows >= 1 && cols >= 1);
    let valid_count = points.iter().filter(|p| p.result.valid).count();
    if valid_count < 3 {
        return Err(Error::TooFewPoints(valid_count));
    }
    let global = solve_affine(points, Weighting::Snr)?.transform;

    let mut grid = Vec::with_capacity((rows + 1) * (cols + 1));
    for r in 0..=rows {
        for c in 0..=cols {
            grid.push((
                rect.x + rect.width * c as f64 / cols as f64,
                rect.y + rect.height * r as f64 / rows as f64,
            ));
        }
    }
    let stride = cols + 1;
    let mut triangles = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let ul = r * stride + c;
            let ur = ul + 1;
            let ll = ul + stride;
            let lr = ll + 1;
            triangles.push([ul, ur, lr]); // A
            triangles.push([ul, lr, ll]); // B
        }
    }

    let mut mesh = TriangleMesh {
        rect,
        rows,
        cols,
        grid,
        triangles,
        to_source: vec![AffineTransform::identity(); 2 * rows * cols],
        fallback: vec![false; 2 * rows * cols],
    };

    // Assign each valid point to the lowest-index triangle containing it.
    let ntri = mesh.triangles.len();
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); ntri];
    for (i, p) in points.iter().enumerate() {
        if !p.result.valid {
            continue;
        }
        let t = mesh.locate(p.cx, p.cy);
        owned[t].push(i);
    }

    // Band: vertex-sharing triangles, nearest six by centroid distance.
    let mut vertex_tris: Vec<Vec<usize>> = vec![Vec::new(); mesh.grid.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &v in tri {
            vertex_tris[v].push(t);
        }
    }
    let bands: Vec<Vec<usize>> = (0..ntri)
        .map(|t| {
            let mut nbrs: Vec<usize> = mesh.triangles[t]
                .iter()
                .flat_map(|&v| vertex_tris[v].iter().copied())
                .filter(|&u| u != t)
                .collect();
            nbrs.sort_unstable();
            nbrs.dedup();
            let ct = mesh.centroid(t);
            let mut keyed: Vec<(f64, usize)> = nbrs
                .into_iter()
                .map(|u| {
                    let cu = mesh.centroid(u);
                    ((cu.0 - ct.0).powi(2) + (cu.1 - ct.1).powi(2), u)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            keyed.into_iter().take(6).map(|(_, u)| u).collect()
        })
        .collect();

    for t in 0..ntri {
        let mut support: Vec<MatchPoint> = owned[t].iter().map(|&i| points[i]).collect();
        for &u in &bands[t] {
            support.extend(owned[u].iter().map(|&i| points[i]));
        }
        match solve_affine(&support, Weighting::Snr) {
            Ok(fit) => mesh.to_source[t] = fit.transform,
            Err(_) => {
                mesh.to_source[t] = global;
                mesh.fallback[t] = true;
            }
        }
    }
    Ok(mesh)
}

#[inline]
fn bilinear(src: &Image, x: f64, y: f64) -> Option<f64> {
    // tolerate solver-level rounding just past the edge so border pixels of
    // near-identity warps do not drop out of coverage
    const EDGE_EPS: f64 = 1e-9;
    let xmax = (src.width - 1) as f64;
    let ymax = (src.height - 1) as f64;
    if x < -EDGE_EPS || y < -EDGE_EPS || x > xmax + EDGE_EPS || y > ymax + EDGE_EPS {
        return None;
    }
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(src.width - 1);
    let y1 = (y0 + 1).min(src.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = src.get(x0, y0);
    let v10 = src.get(x1, y0);
    let v01 = src.get(x0, y1);
    let v11 = src.get(x1, y1);
    Some(v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy
        + v11 * fx * fy)
}

/// A section warp: either one whole-section affine (mapping source to output
/// coordinates) or a locally-affine mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "map", rename_all = "snake_case")]
pub enum SectionWarp {
    Affine(AffineTransform),
    Mesh(TriangleMesh),
}

impl SectionWarp {
    /// The whole-section affine view of this warp (for meshes, the average is
    /// not defined; callers that need an affine should keep one alongside).
    pub fn as_affine(&self) -> Option<&AffineTransform> {
        match self {
            SectionWarp::Affine(a) => Some(a),
            SectionWarp::Mesh(_) => None,
        }
    }
}

/// Renders `src` through the warp: every output pixel center is mapped back
/// to a source location (the inverse affine for whole-section warps, the
/// per-triangle source map for meshes) and sampled bilinearly. Out-of-image
/// source locations fill with 0 and clear the coverage mask.
pub fn render(src: &Image, warp: &SectionWarp, out_width: usize, out_height: usize) -> Result<Image> {
    let inverse = match warp {
        SectionWarp::Affine(a) => Some(a.invert()?),
        SectionWarp::Mesh(m) => {
            m.validate()?;
            None
        }
    };

    let mut pixels = vec![0.0; out_width * out_height];
    let mut mask = vec![false; out_width * out_height];
    pixels
        .par_chunks_mut(out_width)
        .zip(mask.par_chunks_mut(out_width))
        .enumerate()
        .for_each(|(y, (prow, mrow))| {
            for x in 0..out_width {
                let (sx, sy) = match (&inverse, warp) {
                    (Some(inv), _) => inv.apply(x as f64, y as f64),
                    (None, SectionWarp::Mesh(m)) => {
                        let t = m.locate(x as f64, y as f64);
                        m.to_source[t].apply(x as f64, y as f64)
                    }
                    _ => unreachable!(),
                };
                if let Some(v) = bilinear(src, sx, sy) {
                    prow[x] = v;
                    mrow[x] = true;
                }
            }
        });

    let mut out = Image::new(out_width, out_height, pixels);
    out.mask = Some(mask);
    out.meta = src.meta;
    Ok(out)
}

/// Evaluates the unique cubic through four (x, y) samples at `x`.
fn lagrange_cubic(xs: [f64; 4], ys: [f64; 4], x: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let mut term = ys[i];
        for j in 0..4 {
            if i != j {
                term *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        acc += term;
    }
    acc
}

/// Replaces the transforms of a failed section span [lo..=hi] by smooth
/// per-parameter interpolation from the anchor sections on either side:
/// a cubic through the two anchors on each side when available, otherwise
/// linear between the single nearest anchors. Extrapolation (a missing
/// anchor side) is refused.
pub fn bridge_gap(
    chain: &[AffineTransform],
    lo: usize,
    hi: usize,
) -> Result<Vec<AffineTransform>> {
    if lo > hi || hi >= chain.len() {
        return Err(Error::BadGapRange {
            lo,
            hi,
            len: chain.len(),
        });
    }
    if lo == 0 {
        return Err(Error::MissingAnchor {
            side: "left",
            lo,
            hi,
        });
    }
    if hi + 1 >= chain.len() {
        return Err(Error::MissingAnchor {
            side: "right",
            lo,
            hi,
        });
    }
    let cubic = lo >= 2 && hi + 2 < chain.len();
    let mut out = chain.to_vec();
    for k in lo..=hi {
        let mut params = [0.0f64; 6];
        for (i, p) in params.iter_mut().enumerate() {
            *p = if cubic {
                let xs = [
                    (lo - 2) as f64,
                    (lo - 1) as f64,
                    (hi + 1) as f64,
                    (hi + 2) as f64,
                ];
                let ys = [
                    chain[lo - 2].params()[i],
                    chain[lo - 1].params()[i],
                    chain[hi + 1].params()[i],
                    chain[hi + 2].params()[i],
                ];
                lagrange_cubic(xs, ys, k as f64)
            } else {
                let x0 = (lo - 1) as f64;
                let x1 = (hi + 1) as f64;
                let t = (k as f64 - x0) / (x1 - x0);
                chain[lo - 1].params()[i] * (1.0 - t) + chain[hi + 1].params()[i] * t
            };
        }
        out[k] = AffineTransform::from(params);
    }
    Ok(out)
}
