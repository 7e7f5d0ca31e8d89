//! 3D grounding evaluation: oriented-box IoU, greedy matching and
//! average precision at a fixed IoU threshold.
//!
//! Every prediction carries confidence 1.0, so the precision–recall sweep
//! orders predictions by their best IoU against any ground truth in the
//! same image and category, descending, ties broken by input index. AP uses
//! all-point interpolation: the sum of the precision envelope at each true
//! positive, divided by the number of ground truths.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::geometry::{vec3, Se3Pose, UnitQuaternion, Vec3};
use crate::ingest::SceneRecord;
use crate::rng::{keyed_rng, Domain};

/// IoU threshold for a true positive.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.15;
/// Every prediction is scored with this confidence.
pub const FIXED_CONFIDENCE: f64 = 1.0;
pub const DEFAULT_MC_SAMPLES: u32 = 1 << 20;
/// Two box axes count as parallel when the norm of their cross product is
/// at most this.
pub const AXIS_ALIGN_TOLERANCE: f64 = 1e-6;
pub const MIN_BOX_DIM: f64 = 1e-9;

const MC_CHUNK: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate box with dims {0:?}")]
    DegenerateBox(Vec3),
    #[error("box center {0:?} is not finite")]
    NonFiniteCenter(Vec3),
    #[error("boxes share no common axis direction; exact IoU needs yaw-aligned pairs")]
    NotYawAligned,
    #[error("detection confidence must be 1.0, got {0}")]
    Confidence(f64),
    #[error("record {record}, annotation {index}: a size is required to form a box")]
    MissingSize { record: String, index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct OrientedBox3D {
    center: Vec3,
    dims: Vec3,
    rotation: UnitQuaternion,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    center: Vec3,
    dims: Vec3,
    rotation: UnitQuaternion,
}

impl TryFrom<RawBox> for OrientedBox3D {
    type Error = EvalError;

    fn try_from(r: RawBox) -> Result<Self, EvalError> {
        OrientedBox3D::new(r.center, r.dims, r.rotation)
    }
}

impl From<OrientedBox3D> for RawBox {
    fn from(b: OrientedBox3D) -> Self {
        RawBox {
            center: b.center,
            dims: b.dims,
            rotation: b.rotation,
        }
    }
}

impl OrientedBox3D {
    /// `dims` are full extents along the box's local x, y and z axes.
    pub fn new(center: Vec3, dims: Vec3, rotation: UnitQuaternion) -> Result<Self, EvalError> {
        if !vec3::is_finite(center) {
            return Err(EvalError::NonFiniteCenter(center));
        }
        if !dims.iter().all(|d| d.is_finite() && *d > MIN_BOX_DIM) {
            return Err(EvalError::DegenerateBox(dims));
        }
        Ok(Self { center, dims, rotation })
    }

    /// Box at an object pose with the given extents.
    pub fn from_pose(pose: &Se3Pose, dims: Vec3) -> Result<Self, EvalError> {
        Self::new(pose.translation(), dims, pose.rotation())
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn dims(&self) -> Vec3 {
        self.dims
    }

    pub fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// The box moved by a rigid transform.
    pub fn transformed(&self, t: &Se3Pose) -> Self {
        Self {
            center: t.transform_point(self.center),
            dims: self.dims,
            rotation: t.rotation().mul(&self.rotation),
        }
    }

    fn corners(&self) -> [Vec3; 8] {
        let h = vec3::scale(self.dims, 0.5);
        std::array::from_fn(|k| {
            let s = |bit: usize| if k >> bit & 1 == 1 { 1.0 } else { -1.0 };
            vec3::add(self.center, self.rotation.rotate([s(0) * h[0], s(1) * h[1], s(2) * h[2]]))
        })
    }

    fn bits(&self) -> [u64; 10] {
        let q = self.rotation.to_array();
        [
            self.center[0], self.center[1], self.center[2], self.dims[0], self.dims[1], self.dims[2], q[0], q[1], q[2],
            q[3],
        ]
        .map(f64::to_bits)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMethod {
    /// Exact for pairs sharing an axis direction, Monte Carlo otherwise.
    #[default]
    Auto,
    ExactYaw,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouConfig {
    pub method: IouMethod,
    pub samples: u32,
    pub seed: u64,
}

impl Default for IouConfig {
    fn default() -> Self {
        Self {
            method: IouMethod::Auto,
            samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

/// Orders a pair canonically so that `iou3d(a, b) == iou3d(b, a)` bit for bit.
fn canonical<'a>(a: &'a OrientedBox3D, b: &'a OrientedBox3D) -> (&'a OrientedBox3D, &'a OrientedBox3D) {
    if a.bits() <= b.bits() {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D, cfg: &IouConfig) -> Result<f64, EvalError> {
    if a.bits() == b.bits() {
        return Ok(1.0);
    }
    let (a, b) = canonical(a, b);
    match cfg.method {
        IouMethod::ExactYaw => exact_shared_axis_iou(a, b).ok_or(EvalError::NotYawAligned),
        IouMethod::MonteCarlo => Ok(monte_carlo_iou(a, b, cfg.samples, cfg.seed)),
        IouMethod::Auto => Ok(exact_shared_axis_iou(a, b).unwrap_or_else(|| monte_carlo_iou(a, b, cfg.samples, cfg.seed))),
    }
}

fn column(m: &[[f64; 3]; 3], c: usize) -> Vec3 {
    [m[0][c], m[1][c], m[2][c]]
}

/// Exact IoU for boxes with a common axis direction (yaw-only rotations
/// about a shared up axis being the usual case). Works in `a`'s frame:
/// the footprint of `b` on the plane normal to the shared axis is clipped
/// against `a`'s rectangle and the area multiplied by the overlap along
/// the axis. Returns `None` when no axis pair is parallel.
fn exact_shared_axis_iou(a: &OrientedBox3D, b: &OrientedBox3D) -> Option<f64> {
    let ra = a.rotation.to_matrix();
    let rb = b.rotation.to_matrix();
    let (i, j) = [2, 0, 1]
        .into_iter()
        .flat_map(|i| [2, 0, 1].into_iter().map(move |j| (i, j)))
        .find(|&(i, j)| vec3::norm(vec3::cross(column(&ra, i), column(&rb, j))) <= AXIS_ALIGN_TOLERANCE)?;

    // Relative rotation and center of b expressed in a's frame.
    let m: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| vec3::dot(column(&ra, r), column(&rb, c))));
    let d = vec3::sub(b.center, a.center);
    let c: Vec3 = std::array::from_fn(|r| vec3::dot(column(&ra, r), d));

    let (p, q) = match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (k1, k2) = match j {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (ha, hb) = (vec3::scale(a.dims, 0.5), vec3::scale(b.dims, 0.5));
    let u1 = [m[p][k1] * hb[k1], m[q][k1] * hb[k1]];
    let u2 = [m[p][k2] * hb[k2], m[q][k2] * hb[k2]];
    let footprint: Vec<[f64; 2]> = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|(s1, s2)| [c[p] + s1 * u1[0] + s2 * u2[0], c[q] + s1 * u1[1] + s2 * u2[1]])
        .collect();
    let area = polygon_area(&clip_to_rectangle(footprint, ha[p], ha[q]));
    let overlap = (ha[i].min(c[i] + hb[j]) - (-ha[i]).max(c[i] - hb[j])).max(0.0);
    let inter = area * overlap;
    let union = a.volume() + b.volume() - inter;
    Some((inter / union).clamp(0.0, 1.0))
}

/// Sutherland–Hodgman clipping against `|x| ≤ hx`, `|y| ≤ hy`.
fn clip_to_rectangle(mut poly: Vec<[f64; 2]>, hx: f64, hy: f64) -> Vec<[f64; 2]> {
    // Each half-plane as (axis, sign, bound): keep points with sign·p[axis] ≤ bound.
    for (axis, sign, bound) in [(0, 1.0, hx), (0, -1.0, hx), (1, 1.0, hy), (1, -1.0, hy)] {
        if poly.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| sign * p[axis] <= bound;
        let mut out = Vec::with_capacity(poly.len() + 1);
        for k in 0..poly.len() {
            let cur = poly[k];
            let prev = poly[(k + poly.len() - 1) % poly.len()];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (sign * bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut x = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
                x[axis] = sign * bound;
                out.push(x);
            }
            if ci {
                out.push(cur);
            }
        }
        poly = out;
    }
    poly
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len())
        .map(|k| {
            let (p, n) = (poly[k], poly[(k + 1) % poly.len()]);
            p[0] * n[1] - n[0] * p[1]
        })
        .sum();
    twice.abs() / 2.0
}

struct Membership {
    center: Vec3,
    half: Vec3,
    /// Rows are the box axes, so `rt · (p − c)` is the local coordinate.
    rt: [[f64; 3]; 3],
}

impl Membership {
    fn new(b: &OrientedBox3D) -> Self {
        let r = b.rotation.to_matrix();
        Self {
            center: b.center,
            half: vec3::scale(b.dims, 0.5),
            rt: std::array::from_fn(|k| column(&r, k)),
        }
    }

    // Non-short-circuiting `&`: sample points land inside and outside
    // unpredictably, and branches here dominate the Monte Carlo cost.
    fn contains(&self, p: Vec3) -> bool {
        let d = vec3::sub(p, self.center);
        let inside = |k: usize| vec3::dot(self.rt[k], d).abs() <= self.half[k];
        inside(0) & inside(1) & inside(2)
    }
}

/// Estimates IoU from `samples` uniform points in the axis-aligned hull of
/// both boxes: points in both over points in either. Chunks of points use
/// independent keyed streams, so the estimate is reproducible regardless of
/// thread scheduling.
fn monte_carlo_iou(a: &OrientedBox3D, b: &OrientedBox3D, samples: u32, seed: u64) -> f64 {
    let corners: Vec<Vec3> = a.corners().into_iter().chain(b.corners()).collect();
    let lo: Vec3 = std::array::from_fn(|k| corners.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min));
    let hi: Vec3 = std::array::from_fn(|k| corners.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max));
    let (ma, mb) = (Membership::new(a), Membership::new(b));
    let chunks = samples.div_ceil(MC_CHUNK);
    let (both, either) = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let n = MC_CHUNK.min(samples - chunk * MC_CHUNK);
            let mut rng = keyed_rng(seed, Domain::MonteCarloIou, chunk as u64);
            let (mut both, mut either) = (0u64, 0u64);
            for _ in 0..n {
                let p: Vec3 = std::array::from_fn(|k| lo[k] + rng.random::<f64>() * (hi[k] - lo[k]));
                let (ia, ib) = (ma.contains(p), mb.contains(p));
                both += (ia & ib) as u64;
                either += (ia | ib) as u64;
            }
            (both, either)
        })
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
    if either == 0 {
        return 0.0;
    }
    (both as f64 / either as f64).clamp(0.0, 1.0)
}

/// Case-folded NFC form used to compare category names.
pub fn normalize_category(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    caseless::default_case_fold_str(&nfc).nfc().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection", into = "RawDetection")]
pub struct Detection {
    /// Detections are matched only against ground truth with the same image ID.
    pub image_id: String,
    pub category: String,
    pub bbox: OrientedBox3D,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(default)]
    image_id: String,
    category: String,
    bbox: OrientedBox3D,
    #[serde(default = "fixed_confidence")]
    confidence: f64,
}

fn fixed_confidence() -> f64 {
    FIXED_CONFIDENCE
}

impl TryFrom<RawDetection> for Detection {
    type Error = EvalError;

    fn try_from(r: RawDetection) -> Result<Self, EvalError> {
        if r.confidence != FIXED_CONFIDENCE {
            return Err(EvalError::Confidence(r.confidence));
        }
        Ok(Detection::new(r.image_id, r.category, r.bbox))
    }
}

impl From<Detection> for RawDetection {
    fn from(d: Detection) -> Self {
        RawDetection {
            image_id: d.image_id,
            category: d.category,
            bbox: d.bbox,
            confidence: d.confidence,
        }
    }
}

impl Detection {
    pub fn new(image_id: impl Into<String>, category: impl Into<String>, bbox: OrientedBox3D) -> Self {
        Self {
            image_id: image_id.into(),
            category: category.into(),
            bbox,
            confidence: FIXED_CONFIDENCE,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// One box per annotation; every annotation must carry a size.
pub fn detections_from_scene(r: &SceneRecord) -> Result<Vec<Detection>, EvalError> {
    r.annotations
        .iter()
        .enumerate()
        .map(|(index, a)| {
            let size = a.size.ok_or_else(|| EvalError::MissingSize {
                record: r.id.clone(),
                index,
            })?;
            Ok(Detection::new(r.id.clone(), a.category.clone(), OrientedBox3D::from_pose(&a.pose, size)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchResult {
    /// Prediction indices in sweep order.
    pub order: Vec<usize>,
    /// `true` for a true positive, aligned with `order`.
    pub labels: Vec<bool>,
    /// Matched ground-truth index for each prediction, by prediction index.
    pub assignment: Vec<Option<usize>>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching for one category. IoU is computed only within an image.
pub fn match_detections(
    preds: &[Detection],
    gts: &[Detection],
    threshold: f64,
    iou: &IouConfig,
) -> Result<MatchResult, EvalError> {
    let table: Vec<Vec<Option<f64>>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| (p.image_id == g.image_id).then(|| iou3d(&p.bbox, &g.bbox, iou)).transpose())
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let best: Vec<f64> = table
        .iter()
        .map(|row| row.iter().flatten().fold(f64::NEG_INFINITY, |m, v| m.max(*v)))
        .collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&x, &y| best[y].total_cmp(&best[x]).then(x.cmp(&y)));

    let mut taken = vec![false; gts.len()];
    let mut assignment = vec![None; preds.len()];
    let mut labels = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut pick: Option<(usize, f64)> = None;
        for (gi, v) in table[pi].iter().enumerate() {
            if let Some(v) = v {
                if !taken[gi] && *v >= threshold && pick.is_none_or(|(_, b)| *v > b) {
                    pick = Some((gi, *v));
                }
            }
        }
        if let Some((gi, _)) = pick {
            taken[gi] = true;
            assignment[pi] = Some(gi);
        }
        labels.push(pick.is_some());
    }
    let tp = labels.iter().filter(|l| **l).count();
    Ok(MatchResult {
        order,
        fp: labels.len() - tp,
        fn_: gts.len() - tp,
        labels,
        assignment,
        tp,
    })
}

/// All-point interpolated AP. `None` when there is nothing to score
/// (no ground truth and no predictions).
pub fn average_precision(labels: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            tp += *l as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    // An empty f64 `sum()` is -0.0, which would leak into reports.
    let sum = labels
        .iter()
        .zip(&envelope)
        .filter(|(l, _)| **l)
        .fold(0.0, |acc, (_, p)| acc + p);
    Some(sum / n_gt as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    /// `None` when the category has neither ground truth nor predictions.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    /// Mean AP over categories with at least one ground truth.
    pub map_at_threshold: f64,
    /// Keyed by normalized category name.
    pub per_category: BTreeMap<String, CategoryReport>,
}

impl EvalReport {
    pub fn per_category_ap(&self) -> BTreeMap<&str, f64> {
        self.per_category
            .iter()
            .filter_map(|(k, c)| c.ap.map(|ap| (k.as_str(), ap)))
            .collect()
    }
}

pub fn evaluate(
    preds: &[Detection],
    gts: &[Detection],
    threshold: f64,
    iou: &IouConfig,
) -> Result<EvalReport, EvalError> {
    let mut groups: BTreeMap<String, (Vec<Detection>, Vec<Detection>)> = BTreeMap::new();
    for p in preds {
        groups.entry(normalize_category(&p.category)).or_default().0.push(p.clone());
    }
    for g in gts {
        groups.entry(normalize_category(&g.category)).or_default().1.push(g.clone());
    }
    let per_category: BTreeMap<String, CategoryReport> = groups
        .into_par_iter()
        .map(|(cat, (p, g))| {
            let m = match_detections(&p, &g, threshold, iou)?;
            Ok((
                cat,
                CategoryReport {
                    ap: average_precision(&m.labels, g.len()),
                    n_gt: g.len(),
                    n_pred: p.len(),
                    tp: m.tp,
                    fp: m.fp,
                    fn_: m.fn_,
                },
            ))
        })
        .collect::<Result<_, EvalError>>()?;
    let scored: Vec<f64> = per_category
        .values()
        .filter(|c| c.n_gt > 0)
        .map(|c| c.ap.unwrap_or(0.0))
        .collect();
    let map_at_threshold = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        threshold,
        map_at_threshold,
        per_category,
    })
}

/// Translation error in meters and geodesic rotation error in radians.
pub fn pose_errors(pred: &Se3Pose, gt: &Se3Pose) -> (f64, f64) {
    let dt = vec3::norm(vec3::sub(pred.translation(), gt.translation()));
    let d = pred.rotation().dot(&gt.rotation()).abs().min(1.0);
    (dt, 2.0 * d.acos())
}
