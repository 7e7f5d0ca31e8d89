//! Geometric prior fields for the vision encoder.
//!
//! Dense fields are `height × width × channels` arrays. They are cut into
//! `P × P` patches (row-major over the patch grid, row-major inside a patch,
//! channels last) so they line up with the RGB patch tokens. The masking
//! policy removes whole modalities or thins out depth at training time, and
//! every random decision is drawn from a stream keyed by
//! `(seed, stream_index)`.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, RasterField};
use crate::rng::{keyed_rng, Domain};

/// Patch layout identifier written next to patchified fields.
pub const PATCH_LAYOUT_VERSION: &str = "grid-row-major/patch-row-major/channels-last";

#[derive(Debug, Error)]
pub enum PriorsError {
    #[error("field of {height}x{width} is not divisible into {patch}x{patch} patches")]
    NonDivisibleShape {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("depth values and mask have different shapes")]
    ShapeMismatch,
    #[error("invalid depth at row {row}, col {col}: {value}")]
    InvalidDepth { row: usize, col: usize, value: f64 },
    #[error("probability {name} = {value} outside [0, 1]")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("unsupported depth raster: {0}")]
    UnsupportedRaster(String),
    #[error("failed to read depth raster: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to decode depth image: {0}")]
    Image(#[from] image::ImageError),
}

/// Metric depth plus validity mask. Invalid pixels always hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    mask: Array2<bool>,
}

impl DepthMap {
    /// Valid pixels must be finite and non-negative; invalid ones are zeroed.
    pub fn new(mut values: Array2<f64>, mask: Array2<bool>) -> Result<Self, PriorsError> {
        if values.dim() != mask.dim() {
            return Err(PriorsError::ShapeMismatch);
        }
        for ((pos, v), m) in values.indexed_iter_mut().zip(mask.iter()) {
            if !*m {
                *v = 0.0;
            } else if !(v.is_finite() && *v >= 0.0) {
                return Err(PriorsError::InvalidDepth { row: pos.0, col: pos.1, value: *v });
            }
        }
        Ok(Self { values, mask })
    }

    /// Infers the mask as `value > 0` (non-finite values count as invalid).
    pub fn from_values(values: Array2<f64>) -> Self {
        let mask = values.mapv(|v| v.is_finite() && v > 0.0);
        Self::new(values, mask).expect("mask derived from values")
    }

    /// 16-bit integer raster in millimeters, row-major.
    pub fn from_millimeters(height: usize, width: usize, mm: &[u16]) -> Result<Self, PriorsError> {
        let values = Array2::from_shape_vec((height, width), mm.iter().map(|v| *v as f64 / 1000.0).collect())
            .map_err(|_| PriorsError::ShapeMismatch)?;
        Ok(Self::from_values(values))
    }

    /// 32-bit float raster in meters, row-major.
    pub fn from_meters_f32(height: usize, width: usize, meters: &[f32]) -> Result<Self, PriorsError> {
        let values = Array2::from_shape_vec((height, width), meters.iter().map(|v| *v as f64).collect())
            .map_err(|_| PriorsError::ShapeMismatch)?;
        Ok(Self::from_values(values))
    }

    /// Loads a 16-bit grayscale PNG (millimeters) or a single-field `PKR1`
    /// raster (meters).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorsError> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "pkr") {
            let fields = raster::decode_raster_stack(&std::fs::read(path)?)
                .map_err(|e| PriorsError::UnsupportedRaster(e.to_string()))?;
            let [field] = <[RasterField; 1]>::try_from(fields)
                .map_err(|f| PriorsError::UnsupportedRaster(format!("expected 1 field, found {}", f.len())))?;
            return Ok(Self::from_values(field.data.mapv(f64::from)));
        }
        match image::open(path)? {
            image::DynamicImage::ImageLuma16(img) => {
                let (w, h) = img.dimensions();
                Self::from_millimeters(h as usize, w as usize, img.as_raw())
            }
            other => Err(PriorsError::UnsupportedRaster(format!(
                "expected 16-bit grayscale, found {:?}",
                other.color()
            ))),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    fn zeroed(&self) -> Self {
        Self {
            values: Array2::zeros(self.values.dim()),
            mask: Array2::from_elem(self.mask.dim(), false),
        }
    }
}

/// `[D, M]` stack: channel 0 is depth exactly as given, channel 1 the mask.
pub fn stack_depth_mask(d: &DepthMap) -> Array3<f64> {
    let (h, w) = d.dim();
    let mut out = Array3::zeros((h, w, 2));
    out.index_axis_mut(Axis(2), 0).assign(&d.values);
    out.index_axis_mut(Axis(2), 1).assign(&d.mask.mapv(|m| if m { 1.0 } else { 0.0 }));
    out
}

/// A field rearranged into one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patches: Array2<f64>,
    patch_size: usize,
    channels: usize,
    grid: (usize, usize),
}

impl PatchGrid {
    /// `(grid_rows · grid_cols) × (P · P · C)`.
    pub fn patches(&self) -> &Array2<f64> {
        &self.patches
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Patch rows and columns.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }
}

pub fn patchify(field: ArrayView3<'_, f64>, patch: usize) -> Result<PatchGrid, PriorsError> {
    let (h, w, c) = field.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(PriorsError::NonDivisibleShape { height: h, width: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let standard = field.as_standard_layout();
    let blocks = standard
        .view()
        .into_shape_with_order((gh, patch, gw, patch, c))
        .expect("standard layout")
        .permuted_axes([0, 2, 1, 3, 4]);
    let patches = blocks
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((gh * gw, patch * patch * c))
        .expect("standard layout");
    Ok(PatchGrid {
        patches,
        patch_size: patch,
        channels: c,
        grid: (gh, gw),
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Array3<f64> {
    let (gh, gw) = grid.grid;
    let (p, c) = (grid.patch_size, grid.channels);
    grid.patches
        .view()
        .into_shape_with_order((gh, gw, p, p, c))
        .expect("patch grid is standard layout")
        .permuted_axes([0, 2, 1, 3, 4])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((gh * p, gw * p, c))
        .expect("standard layout")
}

/// Training-time modality masking configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub p_drop_ray: f64,
    pub p_drop_depth: f64,
    /// Fraction of valid depth pixels kept by sparse sampling.
    pub sparse_keep_fraction: f64,
    pub seed: u64,
}

impl MaskPolicy {
    pub fn new(p_drop_ray: f64, p_drop_depth: f64, sparse_keep_fraction: f64, seed: u64) -> Result<Self, PriorsError> {
        let p = Self { p_drop_ray, p_drop_depth, sparse_keep_fraction, seed };
        p.validate()?;
        Ok(p)
    }

    /// Keeps everything.
    pub fn passthrough(seed: u64) -> Self {
        Self { p_drop_ray: 0.0, p_drop_depth: 0.0, sparse_keep_fraction: 1.0, seed }
    }

    pub fn validate(&self) -> Result<(), PriorsError> {
        for (name, value) in [
            ("p_drop_ray", self.p_drop_ray),
            ("p_drop_depth", self.p_drop_depth),
            ("sparse_keep_fraction", self.sparse_keep_fraction),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PriorsError::InvalidProbability { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropFlags {
    pub ray_dropped: bool,
    pub depth_dropped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPriors {
    pub ray: Option<Array3<f64>>,
    pub depth: Option<DepthMap>,
    pub flags: DropFlags,
}

/// Independently replaces the raymap and the depth map by all-zero fields.
///
/// Both Bernoulli draws are taken from the stream for `stream_index` whether
/// or not the modality is present; a flag is set only for a present
/// modality that was dropped.
pub fn mask_modality(
    ray: Option<Array3<f64>>,
    depth: Option<DepthMap>,
    policy: &MaskPolicy,
    stream_index: u64,
) -> Result<MaskedPriors, PriorsError> {
    policy.validate()?;
    let mut rng = keyed_rng(policy.seed, Domain::ModalityMask, stream_index);
    let drop_ray = rng.random::<f64>() < policy.p_drop_ray;
    let drop_depth = rng.random::<f64>() < policy.p_drop_depth;

    let flags = DropFlags {
        ray_dropped: drop_ray && ray.is_some(),
        depth_dropped: drop_depth && depth.is_some(),
    };
    let ray = ray.map(|r| if drop_ray { Array3::zeros(r.dim()) } else { r });
    let depth = depth.map(|d| if drop_depth { d.zeroed() } else { d });
    Ok(MaskedPriors { ray, depth, flags })
}

/// Keeps a uniformly random subset of exactly `round(keep_fraction · n)` of
/// the `n` valid pixels.
pub fn sparse_depth_sample(
    d: &DepthMap,
    keep_fraction: f64,
    seed: u64,
    stream_index: u64,
) -> Result<DepthMap, PriorsError> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(PriorsError::InvalidProbability { name: "keep_fraction", value: keep_fraction });
    }
    let (_, w) = d.dim();
    let valid: Vec<usize> = d
        .mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    let keep = (keep_fraction * valid.len() as f64).round() as usize;
    let mut rng = keyed_rng(seed, Domain::SparseDepth, stream_index);
    let chosen = rand::seq::index::sample(&mut rng, valid.len(), keep);

    let mut out = d.zeroed();
    for k in chosen.iter() {
        let flat = valid[k];
        let at = (flat / w, flat % w);
        out.values[at] = d.values[at];
        out.mask[at] = true;
    }
    Ok(out)
}

/// Full masking operator: modality dropout followed by sparse depth
/// sampling of a surviving depth map.
pub fn apply_masking_policy(
    ray: Option<Array3<f64>>,
    depth: Option<DepthMap>,
    policy: &MaskPolicy,
    stream_index: u64,
) -> Result<MaskedPriors, PriorsError> {
    let mut out = mask_modality(ray, depth, policy, stream_index)?;
    if policy.sparse_keep_fraction < 1.0 && !out.flags.depth_dropped {
        if let Some(d) = &out.depth {
            out.depth = Some(sparse_depth_sample(d, policy.sparse_keep_fraction, policy.seed, stream_index)?);
        }
    }
    Ok(out)
}
