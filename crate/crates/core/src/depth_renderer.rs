//! Depth-map rotation renderer.
//!
//! A depth map is lifted to a point cloud with the pinhole intrinsics, moved
//! by a rigid pose, projected again and splatted onto an enlarged canvas with
//! a min-reduction, so nearer surfaces win. Canvas pixels use the convention
//! that source pixel `u` covers `[u, u + 1)` in continuous coordinates; with
//! the canvas bounds kept symmetric about the source frame, cropping the
//! center of the canvas lands exactly on the source pixel grid.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::io_formats::{write_ppm, Raster};

pub const BACKGROUND: f64 = f64::INFINITY;
pub const DEFAULT_RADIUS: usize = 1;
pub const MAX_CANVAS_SIDE: usize = 16384;
pub const MIN_CANVAS_RATIO: f64 = 2.5;

const SNAP_EPS: f64 = 1e-9;

/// Per-pixel depth with a validity mask. Invalid pixels hold `BACKGROUND`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    valid: Array2<bool>,
    min_depth: f64,
    max_depth: f64,
}

impl DepthMap {
    /// Fully valid map; the depth range is taken from the data.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let valid = Array2::from_elem(values.raw_dim(), true);
        Self::masked(values, valid)
    }

    /// Fully valid map with an explicit depth range.
    pub fn with_range(values: Array2<f64>, min_depth: f64, max_depth: f64) -> Result<Self> {
        if !(min_depth > 0.0 && min_depth <= max_depth && max_depth.is_finite()) {
            return Err(Error::Value(format!("bad depth range [{min_depth}, {max_depth}]")));
        }
        if let Some(v) = values.iter().find(|&&v| !(v >= min_depth && v <= max_depth)) {
            return Err(Error::Value(format!("depth {v} outside [{min_depth}, {max_depth}]")));
        }
        let valid = Array2::from_elem(values.raw_dim(), true);
        Ok(Self {
            values,
            valid,
            min_depth,
            max_depth,
        })
    }

    /// Values at invalid pixels are ignored and replaced by `BACKGROUND`.
    pub fn masked(mut values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::Value("depth and mask shapes differ".into()));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::INFINITY);
        let mut any = false;
        for (v, &ok) in values.iter_mut().zip(valid.iter()) {
            if !ok {
                *v = BACKGROUND;
                continue;
            }
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Value(format!("depth must be finite and positive, got {v}")));
            }
            if !any {
                (lo, hi) = (*v, *v);
                any = true;
            } else {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        Ok(Self {
            values,
            valid,
            min_depth: lo,
            max_depth: hi,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn min_depth(&self) -> f64 {
        self.min_depth
    }

    pub fn max_depth(&self) -> f64 {
        self.max_depth
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// `H × W × 3` image, channels nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub data: Array3<f64>,
}

impl RgbImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Value(format!("expected 3 channels, got {}", data.dim().2)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite pixel".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: self.data.slice(s![.., ..;-1, ..]).as_standard_layout().into_owned(),
        }
    }

    pub fn to_raster(&self) -> Raster {
        let (h, w, _) = self.data.dim();
        Raster {
            height: h,
            width: w,
            channels: 3,
            data: self.data.iter().copied().collect(),
        }
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels != 3 {
            return Err(Error::Value(format!("expected 3 channels, got {}", r.channels)));
        }
        let data =
            Array3::from_shape_vec((r.height, r.width, 3), r.data.clone()).map_err(|e| Error::Value(e.to_string()))?;
        Self::new(data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub k: Matrix3<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    /// `depth · K⁻¹ [u, v, 1]`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            depth * (u - self.cx()) / self.fx(),
            depth * (v - self.cy()) / self.fy(),
            depth,
        )
    }
}

pub fn intrinsics_from_fov(width: usize, height: usize, fov_deg: f64) -> Result<CameraIntrinsics> {
    if width < 2 || height < 2 {
        return Err(Error::Domain(format!(
            "image must be at least 2x2, got {width}x{height}"
        )));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::Domain(format!("fov must be in (0, 180) degrees, got {fov_deg}")));
    }
    let f = (width - 1) as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan());
    let k = Matrix3::new(
        f,
        0.0,
        (width - 1) as f64 / 2.0,
        0.0,
        f,
        (height - 1) as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    Ok(CameraIntrinsics {
        k,
        fov_deg,
        width,
        height,
    })
}

/// Rigid motion about a pivot: `P' = R (P - pivot) + pivot + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub pivot: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>, pivot: Vector3<f64>) -> Result<Self> {
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(orth <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(Error::Domain(format!(
                "not a rotation: |RᵀR - I| = {orth:e}, det = {det}"
            )));
        }
        if !(t.iter().chain(pivot.iter()).all(|v| v.is_finite())) {
            return Err(Error::Domain("non-finite translation or pivot".into()));
        }
        Ok(Self { r, t, pivot })
    }

    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
            pivot: Vector3::zeros(),
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self { t, ..Self::identity() }
    }

    /// Rotation by `angle` radians about `axis` through `pivot`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, pivot: Vector3<f64>) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12).ok_or_else(|| Error::Domain("zero rotation axis".into()))?;
        let r = Rotation3::from_axis_angle(&axis, angle).into_inner();
        Ok(Self {
            r,
            t: Vector3::zeros(),
            pivot,
        })
    }

    /// Nine row-major rotation entries followed by the translation.
    pub fn from_slice(v: &[f64], pivot: Vector3<f64>) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Domain(format!("pose needs 12 numbers, got {}", v.len())));
        }
        let r = Matrix3::from_row_slice(&v[..9]);
        Self::new(r, Vector3::new(v[9], v[10], v[11]), pivot)
    }

    pub fn with_pivot(mut self, pivot: Vector3<f64>) -> Self {
        self.pivot = pivot;
        self
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * (p - self.pivot) + self.pivot + self.t
    }

    /// `self ∘ first`: apply `first`, then `self`. The result has pivot 0.
    pub fn compose(&self, first: &Pose) -> Pose {
        let offset = first.pivot + first.t - first.r * first.pivot;
        Pose {
            r: self.r * first.r,
            t: self.r * (offset - self.pivot) + self.pivot + self.t,
            pivot: Vector3::zeros(),
        }
    }

    /// Inverse motion, pivot 0.
    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: self.pivot - rt * (self.pivot + self.t),
            pivot: Vector3::zeros(),
        }
    }
}

/// Row-major `H × W` grid of 3-D points; invalid pixels are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub height: usize,
    pub width: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl PointCloud {
    pub fn at(&self, row: usize, col: usize) -> &Vector3<f64> {
        &self.points[row * self.width + col]
    }

    /// Mean of the valid points.
    pub fn centroid(&self) -> Option<Vector3<f64>> {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        for (p, _) in self.points.iter().zip(&self.valid).filter(|(_, &v)| v) {
            sum += p;
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

pub fn depth_to_pointcloud(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let (h, w) = depth.values.dim();
    let mut points = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for ((row, col), &d) in depth.values.indexed_iter() {
        let ok = depth.valid[(row, col)];
        points.push(if ok {
            k.back_project(col as f64, row as f64, d)
        } else {
            Vector3::zeros()
        });
        valid.push(ok);
    }
    PointCloud {
        height: h,
        width: w,
        points,
        valid,
    }
}

/// Pivot used for rotating a scene: the centroid of its valid back-projected pixels.
pub fn scene_pivot(depth: &DepthMap, k: &CameraIntrinsics) -> Option<Vector3<f64>> {
    depth_to_pointcloud(depth, k).centroid()
}

pub fn transform_pointcloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        ..cloud.clone()
    }
}

/// Image-plane position and depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub d: f64,
    pub valid: bool,
}

pub fn project_point(p: &Vector3<f64>, k: &CameraIntrinsics) -> Projected {
    let h = k.k * p;
    let w = h.z;
    if !(w > 0.0) || !w.is_finite() {
        return Projected {
            u: f64::NAN,
            v: f64::NAN,
            d: w,
            valid: false,
        };
    }
    Projected {
        u: h.x / w,
        v: h.y / w,
        d: w,
        valid: true,
    }
}

pub fn project_points(cloud: &PointCloud, k: &CameraIntrinsics) -> Vec<Projected> {
    cloud
        .points
        .iter()
        .zip(&cloud.valid)
        .map(|(p, &ok)| {
            let mut q = project_point(p, k);
            q.valid &= ok;
            q
        })
        .collect()
}

/// Shared output canvas. Bounds are in continuous source coordinates
/// (`u + 0.5`, `v + 0.5`) and are symmetric about the source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanvasSpec {
    pub height: usize,
    pub width: usize,
    pub h_new: usize,
    pub w_new: usize,
    pub x_min_g: f64,
    pub x_max_g: f64,
    pub y_min_g: f64,
    pub y_max_g: f64,
    pub ratio: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `floor(t)`, except that values within `SNAP_EPS` of an integer snap to it.
fn snap_floor(t: f64) -> f64 {
    let r = t.round();
    if (t - r).abs() < SNAP_EPS {
        r
    } else {
        t.floor()
    }
}

impl CanvasSpec {
    /// Canvas of `scale · (W/g) × scale · (H/g)` with `g = gcd(W, H)`, centered on the source frame.
    pub fn centered(width: usize, height: usize, scale: usize) -> Result<Self> {
        let g = gcd(width, height);
        if g == 0 {
            return Err(Error::Canvas("empty source frame".into()));
        }
        let (w_new, h_new) = (scale * (width / g), scale * (height / g));
        if w_new > MAX_CANVAS_SIDE || h_new > MAX_CANVAS_SIDE {
            return Err(Error::Canvas(format!(
                "canvas {w_new}x{h_new} exceeds {MAX_CANVAS_SIDE}; projected bounds degenerate"
            )));
        }
        let (w, h) = (width as f64, height as f64);
        let (wn, hn) = (w_new as f64, h_new as f64);
        Ok(Self {
            height,
            width,
            h_new,
            w_new,
            x_min_g: (w - wn + 1.0) / 2.0,
            x_max_g: (w + wn - 1.0) / 2.0,
            y_min_g: (h - hn + 1.0) / 2.0,
            y_max_g: (h + hn - 1.0) / 2.0,
            ratio: wn / w,
        })
    }

    fn scale_x(&self) -> f64 {
        (self.w_new - 1) as f64 / (self.x_max_g - self.x_min_g)
    }

    fn scale_y(&self) -> f64 {
        (self.h_new - 1) as f64 / (self.y_max_g - self.y_min_g)
    }

    /// Continuous canvas position (column, row) of a projected point.
    pub fn position(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u + 0.5 - self.x_min_g) * self.scale_x(),
            (v + 0.5 - self.y_min_g) * self.scale_y(),
        )
    }

    /// Nearest canvas pixel `(row, col)`; may lie outside the canvas.
    pub fn pixel(&self, u: f64, v: f64) -> (i64, i64) {
        let (x, y) = self.position(u, v);
        (snap_floor(y + 0.5) as i64, snap_floor(x + 0.5) as i64)
    }

    /// Source-frame coordinates of the center of canvas pixel `(row, col)`.
    pub fn source_coords(&self, row: usize, col: usize) -> (f64, f64) {
        (
            col as f64 / self.scale_x() + self.x_min_g - 0.5,
            row as f64 / self.scale_y() + self.y_min_g - 0.5,
        )
    }

    pub fn crop_offsets(&self) -> (usize, usize) {
        ((self.h_new - self.height) / 2, (self.w_new - self.width) / 2)
    }

    /// Checks symmetry, aspect and minimum ratio.
    pub fn check(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        let sym_x = (self.x_min_g + self.x_max_g - w).abs();
        let sym_y = (self.y_min_g + self.y_max_g - h).abs();
        let aspect = (self.w_new as f64 / self.h_new as f64 - w / h).abs();
        if sym_x > 1e-6 || sym_y > 1e-6 {
            return Err(Error::Canvas(format!("bounds not symmetric ({sym_x:e}, {sym_y:e})")));
        }
        if aspect > 1e-6 {
            return Err(Error::Canvas(format!("aspect off by {aspect:e}")));
        }
        if self.ratio < MIN_CANVAS_RATIO {
            return Err(Error::Canvas(format!("ratio {} below {MIN_CANVAS_RATIO}", self.ratio)));
        }
        Ok(())
    }
}

/// Sizes one canvas that holds every depth map rendered under its pose.
///
/// `depths` holds either one template used for every pose or one map per
/// pose. Two auxiliary corner boxes mirror the extreme projected bounds
/// through the frame center, which is what makes the bounds symmetric; they
/// only size the canvas and are never rendered.
pub fn make_canvas(depths: &[DepthMap], poses: &[Pose], k: &CameraIntrinsics, radius: usize) -> Result<CanvasSpec> {
    if poses.is_empty() {
        return Err(Error::Canvas("at least one pose is required".into()));
    }
    if depths.len() != 1 && depths.len() != poses.len() {
        return Err(Error::Canvas(format!(
            "{} depth maps for {} poses",
            depths.len(),
            poses.len()
        )));
    }
    let (width, height) = (depths[0].width(), depths[0].height());
    if depths.iter().any(|d| d.width() != width || d.height() != height) {
        return Err(Error::Canvas("depth maps differ in size".into()));
    }

    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (mut ax, mut ay) = (0.0f64, 0.0f64);
    let mut any = false;
    for (i, pose) in poses.iter().enumerate() {
        let depth = &depths[if depths.len() == 1 { 0 } else { i }];
        let cloud = transform_pointcloud(&depth_to_pointcloud(depth, k), pose);
        for p in project_points(&cloud, k).iter().filter(|p| p.valid) {
            ax = ax.max((p.u + 0.5 - cx).abs());
            ay = ay.max((p.v + 0.5 - cy).abs());
            any = true;
        }
    }
    if !any {
        return Err(Error::Canvas("no point projects in front of the camera".into()));
    }
    if !(ax.is_finite() && ay.is_finite()) {
        return Err(Error::Canvas("projected bounds are not finite".into()));
    }
    let pad = radius as f64 + 1.0;
    let (ax, ay) = (ax + pad, ay + pad);

    let g = gcd(width, height);
    let (w0, h0) = ((width / g) as f64, (height / g) as f64);
    let need = (MIN_CANVAS_RATIO * g as f64)
        .max((2.0 * ax + 1.0) / w0)
        .max((2.0 * ay + 1.0) / h0)
        .ceil();
    if need * w0.max(h0) > MAX_CANVAS_SIDE as f64 {
        return Err(Error::Canvas(format!(
            "required canvas exceeds {MAX_CANVAS_SIDE} pixels per side; projected bounds degenerate"
        )));
    }
    let mut scale = need as usize;
    // keeps (W_new - W) and (H_new - H) even so the center crop is pixel aligned
    if scale % 2 != g % 2 {
        scale += 1;
    }
    let spec = CanvasSpec::centered(width, height, scale)?;
    spec.check()?;
    Ok(spec)
}

/// Splat result on the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub depth: DepthMap,
    /// Splat targets that fell outside the canvas.
    pub dropped: usize,
    /// Points behind the camera or otherwise invalid.
    pub invalid: usize,
    /// Mean distance between a point's canvas position and its pixel center.
    pub mean_rounding_error: f64,
}

/// Offsets `(di, dj)` with `di² + dj² ≤ r²`.
pub fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r * r {
                out.push((di, dj));
            }
        }
    }
    out
}

/// Z-buffer splat of a single image's points. See [`scatter_min_render_batch`].
pub fn scatter_min_render(points: &[Projected], canvas: &CanvasSpec, radius: usize) -> Rendered {
    scatter_min_render_batch(&[points.to_vec()], canvas, radius)
        .pop()
        .expect("one image in, one image out")
}

/// Splats every point of every image onto a flat `N · H_new · W_new` buffer,
/// keeping the smallest depth per pixel.
pub fn scatter_min_render_batch(batch: &[Vec<Projected>], canvas: &CanvasSpec, radius: usize) -> Vec<Rendered> {
    let (hn, wn) = (canvas.h_new, canvas.w_new);
    let plane = hn * wn;
    let offsets = disk_offsets(radius);

    let mut targets: Vec<(usize, f64)> = Vec::new();
    let mut dropped = vec![0usize; batch.len()];
    let mut invalid = vec![0usize; batch.len()];
    let mut rounding = vec![(0.0f64, 0usize); batch.len()];
    for (n, points) in batch.iter().enumerate() {
        for p in points {
            if !p.valid {
                invalid[n] += 1;
                continue;
            }
            let (row, col) = canvas.pixel(p.u, p.v);
            let (x, y) = canvas.position(p.u, p.v);
            rounding[n].0 += (x - col as f64).hypot(y - row as f64);
            rounding[n].1 += 1;
            for &(di, dj) in &offsets {
                let (i, j) = (row + di, col + dj);
                if i < 0 || j < 0 || i >= hn as i64 || j >= wn as i64 {
                    dropped[n] += 1;
                    continue;
                }
                targets.push((n * plane + i as usize * wn + j as usize, p.d));
            }
        }
    }

    let mut buffer = vec![BACKGROUND; batch.len() * plane];
    for (l, d) in targets {
        if d < buffer[l] {
            buffer[l] = d;
        }
    }

    buffer
        .chunks(plane)
        .enumerate()
        .map(|(n, chunk)| {
            let values = Array2::from_shape_vec((hn, wn), chunk.to_vec()).expect("plane size");
            let valid = values.mapv(|v| v < BACKGROUND);
            let (err, count) = rounding[n];
            Rendered {
                depth: DepthMap::masked(values, valid).expect("splatted depths are positive"),
                dropped: dropped[n],
                invalid: invalid[n],
                mean_rounding_error: if count > 0 { err / count as f64 } else { 0.0 },
            }
        })
        .collect()
}

/// Central `h × w` window with offsets `⌊(H_new - h)/2⌋`, `⌊(W_new - w)/2⌋`.
pub fn center_crop_array<T: Clone>(a: &Array2<T>, h: usize, w: usize) -> Result<Array2<T>> {
    let (hn, wn) = a.dim();
    if h > hn || w > wn {
        return Err(Error::Canvas(format!("cannot crop {hn}x{wn} to {h}x{w}")));
    }
    let (oy, ox) = ((hn - h) / 2, (wn - w) / 2);
    Ok(a.slice(s![oy..oy + h, ox..ox + w]).to_owned())
}

pub fn center_crop(depth: &DepthMap, h: usize, w: usize) -> Result<DepthMap> {
    DepthMap::masked(
        center_crop_array(&depth.values, h, w)?,
        center_crop_array(&depth.valid, h, w)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightingParams {
    pub k_a: f64,
    pub k_d: f64,
    pub l_dx: f64,
    pub l_dy: f64,
}

impl LightingParams {
    pub fn new(k_a: f64, k_d: f64, l_dx: f64, l_dy: f64) -> Result<Self> {
        let l = Self { k_a, k_d, l_dx, l_dy };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.k_a) && unit(self.k_d)) {
            return Err(Error::Domain(format!(
                "k_a and k_d must be in [0, 1], got {} and {}",
                self.k_a, self.k_d
            )));
        }
        if !(self.l_dx.is_finite() && self.l_dy.is_finite()) {
            return Err(Error::Domain("non-finite light direction".into()));
        }
        Ok(())
    }

    /// `(l_dx, l_dy, 1)` normalized.
    pub fn direction(&self) -> Vector3<f64> {
        Vector3::new(self.l_dx, self.l_dy, 1.0).normalize()
    }
}

/// Unit normals `Pu × Pv` of the back-projected surface, `H × W × 3`.
///
/// Derivatives are central where both neighbours are valid and one-sided
/// otherwise; degenerate pixels get `(0, 0, 1)`.
pub fn surface_normals(depth: &DepthMap, k: &CameraIntrinsics) -> Array3<f64> {
    let cloud = depth_to_pointcloud(depth, k);
    let (h, w) = (cloud.height, cloud.width);
    let ok = |r: usize, c: usize| cloud.valid[r * w + c];
    let diff = |r0: usize, c0: usize, r1: usize, c1: usize, r2: usize, c2: usize, has_prev: bool, has_next: bool| match (
        has_prev, has_next,
    ) {
        (true, true) => (cloud.at(r2, c2) - cloud.at(r0, c0)) / 2.0,
        (false, true) => cloud.at(r2, c2) - cloud.at(r1, c1),
        (true, false) => cloud.at(r1, c1) - cloud.at(r0, c0),
        (false, false) => Vector3::zeros(),
    };
    let mut out = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let mut n = Vector3::new(0.0, 0.0, 1.0);
            if ok(r, c) {
                let left = c > 0 && ok(r, c - 1);
                let right = c + 1 < w && ok(r, c + 1);
                let up = r > 0 && ok(r - 1, c);
                let down = r + 1 < h && ok(r + 1, c);
                let pu = diff(r, c.saturating_sub(1), r, c, r, (c + 1).min(w - 1), left, right);
                let pv = diff(r.saturating_sub(1), c, r, c, (r + 1).min(h - 1), c, up, down);
                let cross = pu.cross(&pv);
                let len = cross.norm();
                if len > 0.0 && len.is_finite() {
                    n = cross / len;
                }
            }
            for ch in 0..3 {
                out[(r, c, ch)] = n[ch];
            }
        }
    }
    out
}

/// Lambertian shading `albedo ∘ (k_a + k_d · max(0, ⟨l, n⟩))`, clamped to `[0, 1]`.
pub fn shade(depth: &DepthMap, albedo: &RgbImage, light: &LightingParams, k: &CameraIntrinsics) -> Result<RgbImage> {
    light.validate()?;
    if (albedo.height(), albedo.width()) != (depth.height(), depth.width()) {
        return Err(Error::Value("albedo and depth sizes differ".into()));
    }
    if albedo.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Value("albedo must lie in [0, 1]".into()));
    }
    let normals = surface_normals(depth, k);
    let l = light.direction();
    let mut out = albedo.data.clone();
    for r in 0..depth.height() {
        for c in 0..depth.width() {
            let n = Vector3::new(normals[(r, c, 0)], normals[(r, c, 1)], normals[(r, c, 2)]);
            let s = l.dot(&n).max(0.0);
            let gain = light.k_a + light.k_d * s;
            for ch in 0..3 {
                out[(r, c, ch)] = (out[(r, c, ch)] * gain).clamp(0.0, 1.0);
            }
        }
    }
    RgbImage::new(out)
}

/// Bilinear sample at `(x, y)`; `None` if any tap with positive weight is
/// outside the image or invalid.
pub fn bilinear_sample(img: &RgbImage, valid: Option<&Array2<bool>>, x: f64, y: f64) -> Option<[f64; 3]> {
    let (h, w) = (img.height(), img.width());
    let x = snap_edge(x, w);
    let y = snap_edge(y, h);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let (r, c) = (y0 + dy, x0 + dx);
            if r >= h || c >= w || valid.is_some_and(|m| !m[(r, c)]) {
                return None;
            }
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wgt * img.data[(r, c, ch)];
            }
        }
    }
    Some(out)
}

fn snap_edge(x: f64, n: usize) -> f64 {
    let hi = (n - 1) as f64;
    if x < 0.0 && x > -SNAP_EPS {
        0.0
    } else if x > hi && x < hi + SNAP_EPS {
        hi
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpOutput {
    pub image: RgbImage,
    /// Pixels that received a sample.
    pub mask: Array2<bool>,
    /// Rendered depth, cropped to the source frame.
    pub depth: DepthMap,
}

/// Re-renders `source` as seen after moving its surface by `pose`.
///
/// The depth is splatted onto the canvas and cropped back to `H × W`. Each
/// covered output pixel is back-projected at its rendered depth, moved by the
/// inverse pose and projected into the source, where the color is sampled
/// bilinearly. Pixels without a valid sample stay black with mask 0.
pub fn warp_image(
    source: &RgbImage,
    depth: &DepthMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    canvas: &CanvasSpec,
    radius: usize,
) -> Result<WarpOutput> {
    let (h, w) = (depth.height(), depth.width());
    if (source.height(), source.width()) != (h, w) || (canvas.height, canvas.width) != (h, w) {
        return Err(Error::Value("source, depth and canvas sizes differ".into()));
    }
    let cloud = transform_pointcloud(&depth_to_pointcloud(depth, k), pose);
    let rendered = scatter_min_render(&project_points(&cloud, k), canvas, radius);
    let (oy, ox) = canvas.crop_offsets();
    let cropped = center_crop(&rendered.depth, h, w)?;

    let inv = pose.inverse();
    let mut image = RgbImage::zeros(h, w);
    let mut mask = Array2::from_elem((h, w), false);
    for ((r, c), &d) in cropped.values.indexed_iter() {
        if !cropped.valid[(r, c)] {
            continue;
        }
        let (u, v) = canvas.source_coords(r + oy, c + ox);
        let p = inv.apply(&k.back_project(u, v, d));
        let q = project_point(&p, k);
        if !q.valid {
            continue;
        }
        if let Some(px) = bilinear_sample(source, Some(&depth.valid), q.u, q.v) {
            for (ch, val) in px.iter().enumerate() {
                image.data[(r, c, ch)] = *val;
            }
            mask[(r, c)] = true;
        }
    }
    Ok(WarpOutput {
        image,
        mask,
        depth: cropped,
    })
}

/// PSNR in dB over masked pixels, peak value 1. Infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: &Array2<bool>) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for ch in 0..3 {
            let e = a.data[(r, c, ch)] - b.data[(r, c, ch)];
            se += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Mask);
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// A hemisphere bulging from a backplane, its albedo and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct HemisphereScene {
    pub depth: DepthMap,
    pub albedo: RgbImage,
    pub k: CameraIntrinsics,
    pub light: LightingParams,
}

pub fn hemisphere_scene(size: usize) -> Result<HemisphereScene> {
    let k = intrinsics_from_fov(size, size, 30.0)?;
    let plane = 10.0;
    let radius = 0.6 * plane * (k.fov_deg.to_radians() / 2.0).tan();
    let mut depth = Array2::zeros((size, size));
    for ((r, c), d) in depth.indexed_iter_mut() {
        let ray = k.back_project(c as f64, r as f64, 1.0);
        let rr = ray.norm_squared();
        let disc = plane * plane - rr * (plane * plane - radius * radius);
        *d = if disc >= 0.0 {
            ((plane - disc.sqrt()) / rr).min(plane)
        } else {
            plane
        };
    }
    let hi = (size - 1) as f64;
    let albedo = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| match ch {
        0 => 0.2 + 0.7 * c as f64 / hi,
        1 => 0.2 + 0.7 * r as f64 / hi,
        _ => 0.6,
    });
    Ok(HemisphereScene {
        depth: DepthMap::new(depth)?,
        albedo: RgbImage::new(albedo)?,
        k,
        light: LightingParams::new(0.4, 0.6, 0.3, -0.3)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrame {
    /// 0 = x, 1 = y, 2 = z.
    pub axis: usize,
    pub angle_deg: f64,
    pub image: RgbImage,
    pub mask: Array2<bool>,
}

/// Shades the hemisphere once and re-renders it while sweeping a rotation
/// about each axis from `-max` to `+max` in `2 · steps + 1` frames.
pub fn render_hemisphere_demo(size: usize, max_angles_deg: [f64; 3], steps: usize) -> Result<Vec<DemoFrame>> {
    let scene = hemisphere_scene(size)?;
    let shaded = shade(&scene.depth, &scene.albedo, &scene.light, &scene.k)?;
    let pivot = scene_pivot(&scene.depth, &scene.k).ok_or(Error::Mask)?;
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];

    let mut plan = Vec::new();
    for (axis, &max) in max_angles_deg.iter().enumerate() {
        for i in 0..=2 * steps {
            let angle = if steps == 0 {
                0.0
            } else {
                max * (i as f64 - steps as f64) / steps as f64
            };
            plan.push((
                axis,
                angle,
                Pose::from_axis_angle(axes[axis], angle.to_radians(), pivot)?,
            ));
        }
    }
    let poses: Vec<Pose> = plan.iter().map(|p| p.2).collect();
    let canvas = make_canvas(std::slice::from_ref(&scene.depth), &poses, &scene.k, DEFAULT_RADIUS)?;

    plan.into_iter()
        .map(|(axis, angle_deg, pose)| {
            let out = warp_image(&shaded, &scene.depth, &pose, &scene.k, &canvas, DEFAULT_RADIUS)?;
            Ok(DemoFrame {
                axis,
                angle_deg,
                image: out.image,
                mask: out.mask,
            })
        })
        .collect()
}

/// Writes frames as `frame_<axis>_<index>.ppm`.
pub fn write_demo_frames(frames: &[DemoFrame], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = ["x", "y", "z"];
    let mut counters = [0usize; 3];
    let mut out = Vec::new();
    for f in frames {
        let path = dir.join(format!("frame_{}_{:03}.ppm", names[f.axis], counters[f.axis]));
        counters[f.axis] += 1;
        write_ppm(&f.image.to_raster(), &path)?;
        out.push(path);
    }
    Ok(out)
}
