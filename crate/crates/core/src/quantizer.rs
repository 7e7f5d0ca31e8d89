//! Discretization tables mapping continuous pose and size components to bin
//! indices and back.
//!
//! Rotations (Euler angles) and normalized image locations use uniform bins.
//! Translations and sizes use equal-frequency bins whose edges sit at the
//! empirical quantiles of a fitting sample, so every bin is used about equally
//! often on data drawn from the same distribution.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, EulerAngles, Se3Pose, Vec3};

/// Bins per token family unless configured otherwise.
pub const DEFAULT_BINS: usize = 1024;

/// Version string written into (and required from) bin-table files.
pub const FORMAT_VERSION: &str = "posekit-bins/1";

const MAGIC: &[u8; 4] = b"PKB1";

/// Relative spread applied to tied quantile edges.
const TIE_SPREAD: f64 = 1e-12;

const UNIFORM_WIDTH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("need at least {needed} samples to fit {needed} bins, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite sample {0}")]
    NonFiniteSample(f64),
    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("bin index {index} out of range for {n_bins} bins")]
    IndexOutOfRange { index: u32, n_bins: usize },
    #[error("object size {0:?} must be strictly positive")]
    NonPositiveSize(Vec3),
    #[error("invalid bin table: {0}")]
    InvalidTable(String),
    #[error("table in slot {slot} has family {found}")]
    FamilyMismatch { slot: Family, found: Family },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bin-table format version {found:?} does not match reader version {expected:?}")]
    FormatVersionMismatch { found: String, expected: String },
    #[error("corrupt bin-table file: {0}")]
    CorruptTable(String),
}

/// Token family a table (and a vocabulary range) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Loc,
    Rot,
    TransXy,
    TransZ,
    Size,
}

impl Family {
    /// Canonical order, shared by the vocabulary layout and the file format.
    pub const ALL: [Family; 5] = [
        Family::Loc,
        Family::Rot,
        Family::TransXy,
        Family::TransZ,
        Family::Size,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Loc => "loc",
            Family::Rot => "rot",
            Family::TransXy => "trans_xy",
            Family::TransZ => "trans_z",
            Family::Size => "size",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Family> {
        Family::ALL.get(tag as usize).copied()
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    Uniform,
    Quantile,
}

impl BinMode {
    fn tag(self) -> u8 {
        match self {
            BinMode::Uniform => 0,
            BinMode::Quantile => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<BinMode> {
        match tag {
            0 => Some(BinMode::Uniform),
            1 => Some(BinMode::Quantile),
            _ => None,
        }
    }
}

/// Sorted bin edges for one token family.
///
/// Bin `i` covers `[edges[i], edges[i + 1])`. Values outside the table are
/// clamped to the first or last bin when encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BinTable {
    family: Family,
    mode: BinMode,
    edges: Vec<f64>,
}

impl BinTable {
    /// Builds a table from explicit edges, checking every table invariant.
    pub fn from_edges(family: Family, mode: BinMode, edges: Vec<f64>) -> Result<Self, QuantizeError> {
        if edges.len() < 2 {
            return Err(QuantizeError::InvalidTable(format!(
                "{family}: need at least 2 edges, got {}",
                edges.len()
            )));
        }
        if let Some(e) = edges.iter().find(|e| !e.is_finite()) {
            return Err(QuantizeError::InvalidTable(format!("{family}: non-finite edge {e}")));
        }
        if let Some(i) = edges.windows(2).position(|w| w[0] >= w[1]) {
            return Err(QuantizeError::InvalidTable(format!(
                "{family}: edges not strictly increasing at index {}",
                i + 1
            )));
        }
        if mode == BinMode::Uniform {
            let n = edges.len() - 1;
            let mean = (edges[n] - edges[0]) / n as f64;
            let uneven = edges
                .windows(2)
                .any(|w| ((w[1] - w[0]) - mean).abs() > UNIFORM_WIDTH_TOLERANCE * mean);
            if uneven {
                return Err(QuantizeError::InvalidTable(format!(
                    "{family}: uniform table has unequal bin widths"
                )));
            }
        }
        Ok(Self { family, mode, edges })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn mode(&self) -> BinMode {
        self.mode
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn bin_width(&self, index: u32) -> Result<f64, QuantizeError> {
        let i = self.check_index(index)?;
        Ok(self.edges[i + 1] - self.edges[i])
    }

    /// Index of the bin containing `x`, clamping out-of-range values.
    pub fn encode_value(&self, x: f64) -> Result<u32, QuantizeError> {
        if !x.is_finite() {
            return Err(QuantizeError::NonFiniteSample(x));
        }
        let at_or_below = self.edges.partition_point(|e| *e <= x);
        let index = at_or_below.saturating_sub(1).min(self.n_bins() - 1);
        Ok(index as u32)
    }

    /// Midpoint of bin `index`.
    pub fn decode_value(&self, index: u32) -> Result<f64, QuantizeError> {
        let i = self.check_index(index)?;
        Ok((self.edges[i] + self.edges[i + 1]) / 2.0)
    }

    fn check_index(&self, index: u32) -> Result<usize, QuantizeError> {
        let i = index as usize;
        if i >= self.n_bins() {
            return Err(QuantizeError::IndexOutOfRange {
                index,
                n_bins: self.n_bins(),
            });
        }
        Ok(i)
    }
}

/// Equally spaced edges `lo + k (hi - lo) / n_bins`.
pub fn uniform_bins(family: Family, lo: f64, hi: f64, n_bins: usize) -> Result<BinTable, QuantizeError> {
    if n_bins == 0 {
        return Err(QuantizeError::ZeroBins);
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(QuantizeError::InvalidRange { lo, hi });
    }
    let width = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..n_bins).map(|k| lo + k as f64 * width).collect();
    edges.push(hi);
    BinTable::from_edges(family, BinMode::Uniform, edges)
}

/// Equal-frequency edges at the empirical quantiles `k / n_bins`, linearly
/// interpolated between order statistics.
///
/// Ties in the sample can make neighbouring edges coincide; such edges are
/// pushed up by `1e-12 · max(1, |edge|)` so the table stays strictly
/// increasing.
pub fn fit_quantile_bins(family: Family, samples: &[f64], n_bins: usize) -> Result<BinTable, QuantizeError> {
    if n_bins == 0 {
        return Err(QuantizeError::ZeroBins);
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(QuantizeError::NonFiniteSample(*x));
    }
    if samples.len() < n_bins {
        return Err(QuantizeError::TooFewSamples {
            needed: n_bins,
            got: samples.len(),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);

    let last = sorted.len() - 1;
    let mut edges = Vec::with_capacity(n_bins + 1);
    for k in 0..=n_bins {
        // Position k·(N-1)/n, split into integer and fractional parts exactly.
        let num = k as u128 * last as u128;
        let lo = (num / n_bins as u128) as usize;
        let rem = (num % n_bins as u128) as f64;
        let edge = if rem == 0.0 {
            sorted[lo]
        } else {
            let frac = rem / n_bins as f64;
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        };
        edges.push(edge);
    }
    for k in 1..edges.len() {
        if edges[k] <= edges[k - 1] {
            edges[k] = edges[k - 1] + TIE_SPREAD * edges[k - 1].abs().max(1.0);
        }
    }
    BinTable::from_edges(family, BinMode::Quantile, edges)
}

/// Bin indices of one pose, in `(txy_x, txy_y, tz, roll, pitch, yaw)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoseIndices {
    pub trans_xy: [u32; 2],
    pub trans_z: u32,
    pub rot: [u32; 3],
}

impl PoseIndices {
    pub fn to_array(&self) -> [u32; 6] {
        [
            self.trans_xy[0],
            self.trans_xy[1],
            self.trans_z,
            self.rot[0],
            self.rot[1],
            self.rot[2],
        ]
    }
}

/// The five tables used by the token codec.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSet {
    rot: BinTable,
    trans_xy: BinTable,
    trans_z: BinTable,
    size: BinTable,
    loc: BinTable,
    version: String,
}

impl QuantizerSet {
    pub fn new(
        rot: BinTable,
        trans_xy: BinTable,
        trans_z: BinTable,
        size: BinTable,
        loc: BinTable,
    ) -> Result<Self, QuantizeError> {
        for (slot, table) in [
            (Family::Rot, &rot),
            (Family::TransXy, &trans_xy),
            (Family::TransZ, &trans_z),
            (Family::Size, &size),
            (Family::Loc, &loc),
        ] {
            if table.family() != slot {
                return Err(QuantizeError::FamilyMismatch {
                    slot,
                    found: table.family(),
                });
            }
        }
        Ok(Self {
            rot,
            trans_xy,
            trans_z,
            size,
            loc,
            version: FORMAT_VERSION.to_string(),
        })
    }

    /// Fits the three quantile tables and adds uniform rotation (`[-π, π)`)
    /// and location (`[0, 1)`) tables, all with `n_bins` bins.
    pub fn fit(
        trans_xy_samples: &[f64],
        trans_z_samples: &[f64],
        size_samples: &[f64],
        n_bins: usize,
    ) -> Result<Self, QuantizeError> {
        Self::new(
            uniform_bins(Family::Rot, -PI, PI, n_bins)?,
            fit_quantile_bins(Family::TransXy, trans_xy_samples, n_bins)?,
            fit_quantile_bins(Family::TransZ, trans_z_samples, n_bins)?,
            fit_quantile_bins(Family::Size, size_samples, n_bins)?,
            uniform_bins(Family::Loc, 0.0, 1.0, n_bins)?,
        )
    }

    pub fn table(&self, family: Family) -> &BinTable {
        match family {
            Family::Loc => &self.loc,
            Family::Rot => &self.rot,
            Family::TransXy => &self.trans_xy,
            Family::TransZ => &self.trans_z,
            Family::Size => &self.size,
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Wraps the angle into `[-π, π)` before looking it up.
    pub fn encode_angle(&self, angle: f64) -> Result<u32, QuantizeError> {
        if !angle.is_finite() {
            return Err(QuantizeError::NonFiniteSample(angle));
        }
        self.rot.encode_value(wrap_angle(angle))
    }

    pub fn encode_pose(&self, pose: &Se3Pose) -> Result<PoseIndices, QuantizeError> {
        let t = pose.translation();
        let e = pose.euler();
        Ok(PoseIndices {
            trans_xy: [self.trans_xy.encode_value(t[0])?, self.trans_xy.encode_value(t[1])?],
            trans_z: self.trans_z.encode_value(t[2])?,
            rot: [
                self.encode_angle(e.roll)?,
                self.encode_angle(e.pitch)?,
                self.encode_angle(e.yaw)?,
            ],
        })
    }

    pub fn decode_euler(&self, rot: [u32; 3]) -> Result<EulerAngles, QuantizeError> {
        Ok(EulerAngles {
            roll: self.rot.decode_value(rot[0])?,
            pitch: self.rot.decode_value(rot[1])?,
            yaw: self.rot.decode_value(rot[2])?,
        })
    }

    pub fn decode_pose(&self, idx: &PoseIndices) -> Result<Se3Pose, QuantizeError> {
        let t = [
            self.trans_xy.decode_value(idx.trans_xy[0])?,
            self.trans_xy.decode_value(idx.trans_xy[1])?,
            self.trans_z.decode_value(idx.trans_z)?,
        ];
        let e = self.decode_euler(idx.rot)?;
        Ok(Se3Pose::from_euler(t, &e).expect("decoded values are finite"))
    }

    pub fn encode_size(&self, dims: Vec3) -> Result<[u32; 3], QuantizeError> {
        if let Some(d) = dims.iter().find(|d| !d.is_finite()) {
            return Err(QuantizeError::NonFiniteSample(*d));
        }
        if dims.iter().any(|d| *d <= 0.0) {
            return Err(QuantizeError::NonPositiveSize(dims));
        }
        Ok([
            self.size.encode_value(dims[0])?,
            self.size.encode_value(dims[1])?,
            self.size.encode_value(dims[2])?,
        ])
    }

    pub fn decode_size(&self, idx: [u32; 3]) -> Result<Vec3, QuantizeError> {
        Ok([
            self.size.decode_value(idx[0])?,
            self.size.decode_value(idx[1])?,
            self.size.decode_value(idx[2])?,
        ])
    }

    /// Serializes to the `PKB1` binary layout:
    ///
    /// ```text
    /// "PKB1" | u32 len | version utf-8 | u32 table count
    /// per table: u8 family | u8 mode | u32 n_bins | (n_bins + 1) × f64
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.version.len() as u32).to_le_bytes());
        out.extend_from_slice(self.version.as_bytes());
        out.extend_from_slice(&(Family::ALL.len() as u32).to_le_bytes());
        for family in Family::ALL {
            let t = self.table(family);
            out.push(family.tag());
            out.push(t.mode().tag());
            out.extend_from_slice(&(t.n_bins() as u32).to_le_bytes());
            for e in t.edges() {
                out.extend_from_slice(&e.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantizeError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(QuantizeError::CorruptTable("bad magic".into()));
        }
        let len = r.u32()? as usize;
        let version = std::str::from_utf8(r.take(len)?)
            .map_err(|_| QuantizeError::CorruptTable("version is not utf-8".into()))?;
        if version != FORMAT_VERSION {
            return Err(QuantizeError::FormatVersionMismatch {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let count = r.u32()? as usize;
        let mut tables: [Option<BinTable>; 5] = Default::default();
        for _ in 0..count {
            let family = Family::from_tag(r.u8()?)
                .ok_or_else(|| QuantizeError::CorruptTable("unknown family tag".into()))?;
            let mode = BinMode::from_tag(r.u8()?)
                .ok_or_else(|| QuantizeError::CorruptTable("unknown mode tag".into()))?;
            let n_bins = r.u32()? as usize;
            let mut edges = Vec::with_capacity(n_bins.min(1 << 20) + 1);
            for _ in 0..=n_bins {
                edges.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let table = BinTable::from_edges(family, mode, edges).map_err(|e| match e {
                QuantizeError::InvalidTable(msg) => QuantizeError::CorruptTable(msg),
                other => other,
            })?;
            let slot = &mut tables[family as usize];
            if slot.is_some() {
                return Err(QuantizeError::CorruptTable(format!("duplicate {family} table")));
            }
            *slot = Some(table);
        }
        if r.pos != bytes.len() {
            return Err(QuantizeError::CorruptTable("trailing bytes".into()));
        }
        let [loc, rot, trans_xy, trans_z, size] = tables.map(|t| t);
        let missing = |f: Family| QuantizeError::CorruptTable(format!("missing {f} table"));
        Self::new(
            rot.ok_or_else(|| missing(Family::Rot))?,
            trans_xy.ok_or_else(|| missing(Family::TransXy))?,
            trans_z.ok_or_else(|| missing(Family::TransZ))?,
            size.ok_or_else(|| missing(Family::Size))?,
            loc.ok_or_else(|| missing(Family::Loc))?,
        )
    }
}

pub fn save_quantizers(q: &QuantizerSet, path: impl AsRef<Path>) -> Result<(), QuantizeError> {
    fs::write(path, q.to_bytes())?;
    Ok(())
}

pub fn load_quantizers(path: impl AsRef<Path>) -> Result<QuantizerSet, QuantizeError> {
    QuantizerSet::from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QuantizeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| QuantizeError::CorruptTable(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, QuantizeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, QuantizeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Occupancy counts of `samples` under `table`.
pub fn occupancy(table: &BinTable, samples: &[f64]) -> Result<Vec<u64>, QuantizeError> {
    let mut counts = vec![0u64; table.n_bins()];
    for x in samples {
        counts[table.encode_value(*x)? as usize] += 1;
    }
    Ok(counts)
}

/// Shannon entropy in bits of a histogram.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit4() -> BinTable {
        uniform_bins(Family::Loc, 0.0, 1.0, 4).unwrap()
    }

    fn small_set() -> QuantizerSet {
        let xy: Vec<f64> = (0..2000).map(|i| -1.0 + i as f64 / 1000.0).collect();
        let z: Vec<f64> = (0..2000).map(|i| 0.2 + i as f64 / 500.0).collect();
        let size: Vec<f64> = (0..2000).map(|i| 0.01 + i as f64 / 2000.0).collect();
        QuantizerSet::fit(&xy, &z, &size, 64).unwrap()
    }

    #[test]
    fn quantile_bins_split_one_to_eight_evenly() {
        let samples: Vec<f64> = (1..=8).map(f64::from).collect();
        let t = fit_quantile_bins(Family::TransZ, &samples, 4).unwrap();
        // Sort-and-count oracle: walk the sorted sample against the edges.
        let e = t.edges();
        let mut counts = [0; 4];
        for x in &samples {
            let i = (0..4)
                .find(|&i| *x >= e[i] && (*x < e[i + 1] || i == 3))
                .unwrap();
            counts[i] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        assert_eq!(occupancy(&t, &samples).unwrap(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn quantile_bins_of_uniform_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..1_000_000).map(|_| rng.random::<f64>()).collect();
        let t = fit_quantile_bins(Family::TransXy, &samples, 4).unwrap();
        for (e, want) in t.edges().iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((e - want).abs() < 0.01, "{:?}", t.edges());
        }
    }

    #[test]
    fn single_bin_spans_min_to_max() {
        let t = fit_quantile_bins(Family::Size, &[3.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(t.edges(), &[1.0, 3.0]);
        assert_eq!(occupancy(&t, &[3.0, 1.0, 2.0]).unwrap(), vec![3]);
    }

    #[test]
    fn quantile_fit_errors() {
        assert!(matches!(
            fit_quantile_bins(Family::Size, &[1.0, 2.0], 3),
            Err(QuantizeError::TooFewSamples { needed: 3, got: 2 })
        ));
        assert!(matches!(
            fit_quantile_bins(Family::Size, &[1.0, f64::NAN], 1),
            Err(QuantizeError::NonFiniteSample(_))
        ));
        assert!(matches!(
            fit_quantile_bins(Family::Size, &[1.0], 0),
            Err(QuantizeError::ZeroBins)
        ));
    }

    #[test]
    fn ties_are_respread() {
        let samples = vec![5.0; 100];
        let t = fit_quantile_bins(Family::Size, &samples, 4).unwrap();
        assert!(t.edges().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.edges()[0], 5.0);
        assert!(t.edges()[4] - 5.0 < 1e-10);

        let mut samples: Vec<f64> = (0..90).map(f64::from).collect();
        samples.extend([10.0; 30]);
        let t = fit_quantile_bins(Family::Size, &samples, 8).unwrap();
        assert!(t.edges().windows(2).all(|w| w[0] < w[1]));
        // Each bin holds N/n = 15 ± the 30 tied values.
        for c in occupancy(&t, &samples).unwrap() {
            assert!(c <= 15 + 30, "{c}");
        }
    }

    #[test]
    fn uniform_bins_examples() {
        assert_eq!(unit4().edges(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(uniform_bins(Family::Loc, 0.0, 1.0, 1).unwrap().edges(), &[0.0, 1.0]);
        let rot = uniform_bins(Family::Rot, -PI, PI, 1024).unwrap();
        assert_eq!(rot.edges().len(), 1025);
        for w in rot.edges().windows(2) {
            assert!((w[1] - w[0] - 2.0 * PI / 1024.0).abs() < 1e-12);
        }
        assert!(matches!(
            uniform_bins(Family::Loc, 1.0, 1.0, 4),
            Err(QuantizeError::InvalidRange { .. })
        ));
    }

    #[test]
    fn encode_and_decode_examples() {
        let t = unit4();
        assert_eq!(t.encode_value(0.3).unwrap(), 1);
        assert_eq!(t.encode_value(-10.0).unwrap(), 0);
        assert_eq!(t.encode_value(1.0).unwrap(), 3);
        assert_eq!(t.encode_value(50.0).unwrap(), 3);
        assert_eq!(t.decode_value(1).unwrap(), 0.375);
        assert!(matches!(t.decode_value(4), Err(QuantizeError::IndexOutOfRange { .. })));
        assert!(matches!(t.encode_value(f64::INFINITY), Err(QuantizeError::NonFiniteSample(_))));
    }

    #[test]
    fn encode_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..5000).map(|_| rng.random::<f64>().powi(3)).collect();
        let t = fit_quantile_bins(Family::TransZ, &samples, 37).unwrap();
        let e = t.edges();
        for _ in 0..100_000 {
            let x = e[0] + rng.random::<f64>() * (e[37] - e[0]);
            let linear = (0..37).find(|&i| e[i] <= x && x < e[i + 1]).unwrap();
            let i = t.encode_value(x).unwrap() as usize;
            assert_eq!(i, linear);
            assert!(e[i] <= x && x < e[i + 1]);
        }
    }

    #[test]
    fn pose_channels_are_separate() {
        let q = small_set();
        let id = q.encode_pose(&Se3Pose::IDENTITY).unwrap();
        let zero_rot = q.encode_angle(0.0).unwrap();
        assert_eq!(id.rot, [zero_rot; 3]);

        let a = Se3Pose::from_translation(0.1, -0.3, 1.0).unwrap();
        let b = Se3Pose::from_translation(0.1, -0.3, 3.0).unwrap();
        let (ia, ib) = (q.encode_pose(&a).unwrap(), q.encode_pose(&b).unwrap());
        assert_eq!(ia.trans_xy, ib.trans_xy);
        assert_eq!(ia.rot, ib.rot);
        assert_ne!(ia.trans_z, ib.trans_z);
    }

    #[test]
    fn symmetric_xy_table_gives_equal_indices_at_origin() {
        let xy: Vec<f64> = (-500..=500).map(|i| i as f64 / 100.0).collect();
        let q = QuantizerSet::fit(&xy, &xy, &[1.0, 2.0, 3.0, 4.0], 4).unwrap();
        let idx = q.encode_pose(&Se3Pose::IDENTITY).unwrap();
        assert_eq!(idx.trans_xy[0], idx.trans_xy[1]);
    }

    #[test]
    fn size_encoding() {
        let q = small_set();
        let idx = q.encode_size([0.1, 0.1, 0.1]).unwrap();
        assert!(idx[0] == idx[1] && idx[1] == idx[2]);
        assert!(matches!(q.encode_size([0.1, 0.0, 0.1]), Err(QuantizeError::NonPositiveSize(_))));
        let dims = [0.05, 0.3, 0.77];
        let back = q.decode_size(q.encode_size(dims).unwrap()).unwrap();
        for (i, (d, b)) in dims.iter().zip(back).enumerate() {
            let w = q.table(Family::Size).bin_width(idx_of(&q, *d)).unwrap();
            assert!((d - b).abs() <= w / 2.0, "axis {i}");
        }
    }

    fn idx_of(q: &QuantizerSet, d: f64) -> u32 {
        q.table(Family::Size).encode_value(d).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let q = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tables.pkb");
        save_quantizers(&q, &path).unwrap();
        let back = load_quantizers(&path).unwrap();
        assert_eq!(back, q);
        for f in Family::ALL {
            let a: Vec<u64> = q.table(f).edges().iter().map(|e| e.to_bits()).collect();
            let b: Vec<u64> = back.table(f).edges().iter().map(|e| e.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tampered_file_is_corrupt() {
        let q = small_set();
        let mut bytes = q.to_bytes();
        // First edge of the first (loc) table sits after the header.
        let header = 4 + 4 + FORMAT_VERSION.len() + 4 + 1 + 1 + 4;
        bytes[header..header + 8].copy_from_slice(&10.0f64.to_le_bytes());
        assert!(matches!(QuantizerSet::from_bytes(&bytes), Err(QuantizeError::CorruptTable(_))));

        let bytes = q.to_bytes();
        assert!(matches!(
            QuantizerSet::from_bytes(&bytes[..bytes.len() - 3]),
            Err(QuantizeError::CorruptTable(_))
        ));
        assert!(matches!(QuantizerSet::from_bytes(b"nope"), Err(QuantizeError::CorruptTable(_))));
    }

    #[test]
    fn newer_version_is_rejected() {
        let bytes = small_set().to_bytes();
        let mut tampered = bytes.clone();
        let at = 8 + FORMAT_VERSION.len() - 1;
        assert_eq!(tampered[at], b'1');
        tampered[at] = b'2';
        match QuantizerSet::from_bytes(&tampered) {
            Err(QuantizeError::FormatVersionMismatch { found, .. }) => assert_eq!(found, "posekit-bins/2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_quantizers("/nonexistent/tables.pkb"), Err(QuantizeError::Io(_))));
    }

    #[test]
    fn family_slots_are_checked() {
        let loc = unit4();
        let err = QuantizerSet::new(loc.clone(), loc.clone(), loc.clone(), loc.clone(), loc);
        assert!(matches!(err, Err(QuantizeError::FamilyMismatch { slot: Family::Rot, .. })));
    }

    #[test]
    fn entropy_of_distinct_sample_is_near_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..50_000).map(|_| rng.random::<f64>().ln()).collect();
        let t = fit_quantile_bins(Family::TransZ, &samples, 256).unwrap();
        let counts = occupancy(&t, &samples).unwrap();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{lo}..{hi}");
        assert!(entropy_bits(&counts) >= 0.99 * 8.0);
    }

    proptest! {
        #[test]
        fn distinct_samples_balance_within_one(
            mut samples in prop::collection::btree_set(-1_000_000i64..1_000_000, 10..400),
            n_bins in 1usize..10,
        ) {
            let samples: Vec<f64> = std::mem::take(&mut samples).into_iter().map(|v| v as f64 / 7.0).collect();
            prop_assume!(samples.len() >= n_bins);
            let t = fit_quantile_bins(Family::TransXy, &samples, n_bins).unwrap();
            let counts = occupancy(&t, &samples).unwrap();
            let lo = *counts.iter().min().unwrap();
            let hi = *counts.iter().max().unwrap();
            prop_assert!(hi - lo <= 1, "{counts:?}");
        }

        #[test]
        fn encode_is_monotone(a in -5.0..5.0f64, b in -5.0..5.0f64) {
            let q = small_set();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for f in Family::ALL {
                let t = q.table(f);
                prop_assert!(t.encode_value(lo).unwrap() <= t.encode_value(hi).unwrap());
            }
        }

        #[test]
        fn decode_error_within_half_bin(x in -1.0..3.0f64) {
            let q = small_set();
            let t = q.table(Family::TransXy);
            prop_assume!(x >= t.edges()[0] && x < *t.edges().last().unwrap());
            let i = t.encode_value(x).unwrap();
            prop_assert!((t.decode_value(i).unwrap() - x).abs() <= t.bin_width(i).unwrap() / 2.0);
        }

        #[test]
        fn angles_wrap_before_encoding(theta in -PI..PI, k in -3i32..3) {
            let q = small_set();
            // Rounding in θ + 2πk is ~1e-15; stay clear of edges by far more.
            let near_edge = q.table(Family::Rot).edges().iter().any(|e| (e - theta).abs() < 1e-9);
            prop_assume!(!near_edge);
            let shifted = theta + 2.0 * PI * k as f64;
            prop_assert_eq!(q.encode_angle(theta).unwrap(), q.encode_angle(shifted).unwrap());
        }

        #[test]
        fn pose_round_trip_within_half_bin(
            t in prop::array::uniform3(-0.9..0.9f64),
            z in 0.3..4.0f64,
            roll in -3.0..3.0f64, pitch in -1.5..1.5f64, yaw in -3.0..3.0f64,
        ) {
            let q = small_set();
            let e = EulerAngles::new(roll, pitch, yaw).unwrap();
            let p = Se3Pose::from_euler([t[0], t[1], z], &e).unwrap();
            let idx = q.encode_pose(&p).unwrap();
            let back = q.decode_pose(&idx).unwrap();
            let xy = q.table(Family::TransXy);
            for axis in 0..2 {
                let w = xy.bin_width(idx.trans_xy[axis]).unwrap();
                prop_assert!((back.translation()[axis] - p.translation()[axis]).abs() <= w / 2.0);
            }
            let w = q.table(Family::TransZ).bin_width(idx.trans_z).unwrap();
            prop_assert!((back.translation()[2] - z).abs() <= w / 2.0);
        }
    }
}
