//! Extended token vocabulary and the structured sequence grammar.
//!
//! The vocabulary lays out five value families (`loc`, `rot`, `trans_xy`,
//! `trans_z`, `size`) back to back starting at ID 0, followed by six
//! structural tokens. Sequences are flat lists of IDs following this grammar:
//!
//! ```text
//! sequence   := (tuple | trajectory)*
//! tuple      := <obj> <txt> len_hi len_lo byte* loc loc
//!               trans_xy trans_xy trans_z rot rot rot (size size size)? <sep>
//! trajectory := <traj> waypoint+ <eos>
//! waypoint   := <wp> trans_xy trans_xy trans_z rot rot rot loc?
//! ```
//!
//! The category name travels as raw UTF-8 bytes behind the `<txt>` escape;
//! `len_hi`, `len_lo` and each `byte` are raw IDs in `0..=255` and are
//! interpreted positionally. A grounding tuple therefore costs
//! `13 + category bytes` tokens (`+3` with a size), a trajectory
//! `2 + 7·T` tokens (`+T` with gripper openings). The optional trailing `loc`
//! of a waypoint is the gripper opening in `[0, 1]`, and either every
//! waypoint of a trajectory carries one or none does.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Se3Pose, Vec3};
use crate::quantizer::{Family, PoseIndices, QuantizeError, QuantizerSet, DEFAULT_BINS};

pub const VOCAB_LAYOUT_VERSION: &str = "posekit-vocab/1";

/// Longest category name (in UTF-8 bytes) the two length tokens can carry.
pub const MAX_CATEGORY_BYTES: usize = u16::MAX as usize;

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("unknown token id {id} at position {position}")]
    UnknownToken { position: usize, id: u32 },
    #[error("malformed sequence at position {position} (byte offset {}): expected {expected}, found id {found}", position * 4)]
    MalformedStructure {
        position: usize,
        expected: &'static str,
        found: u32,
    },
    #[error("sequence truncated at position {position} (byte offset {})", position * 4)]
    Truncated { position: usize },
    #[error("invalid token file at byte offset {byte_offset}: {reason}")]
    TokenFile { byte_offset: usize, reason: String },
    #[error("invalid tuple: {0}")]
    InvalidTuple(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("vocabulary has {vocab} {family} tokens but the quantizer table has {table} bins")]
    VocabMismatch {
        family: Family,
        vocab: usize,
        table: usize,
    },
    #[error("vocabulary family sizes must be positive")]
    EmptyFamily,
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

impl GrammarError {
    /// Token position for errors raised while parsing a sequence.
    pub fn position(&self) -> Option<usize> {
        match self {
            GrammarError::UnknownToken { position, .. }
            | GrammarError::MalformedStructure { position, .. }
            | GrammarError::Truncated { position } => Some(*position),
            GrammarError::TokenFile { byte_offset, .. } => Some(byte_offset / 4),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structural {
    Obj,
    Traj,
    Wp,
    Sep,
    Eos,
    TextEscape,
}

impl Structural {
    pub const ALL: [Structural; 6] = [
        Structural::Obj,
        Structural::Traj,
        Structural::Wp,
        Structural::Sep,
        Structural::Eos,
        Structural::TextEscape,
    ];
}

/// Bins per family; each must match the corresponding quantizer table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub loc: usize,
    pub rot: usize,
    pub trans_xy: usize,
    pub trans_z: usize,
    pub size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self::uniform(DEFAULT_BINS)
    }
}

impl VocabConfig {
    pub fn uniform(n_bins: usize) -> Self {
        Self {
            loc: n_bins,
            rot: n_bins,
            trans_xy: n_bins,
            trans_z: n_bins,
            size: n_bins,
        }
    }

    /// Family sizes taken from a fitted quantizer set.
    pub fn from_quantizers(q: &QuantizerSet) -> Self {
        let n = |f| q.table(f).n_bins();
        Self {
            loc: n(Family::Loc),
            rot: n(Family::Rot),
            trans_xy: n(Family::TransXy),
            trans_z: n(Family::TransZ),
            size: n(Family::Size),
        }
    }

    fn get(&self, f: Family) -> usize {
        match f {
            Family::Loc => self.loc,
            Family::Rot => self.rot,
            Family::TransXy => self.trans_xy,
            Family::TransZ => self.trans_z,
            Family::Size => self.size,
        }
    }
}

/// A decoded token ID.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Value(Family, u32),
    Structural(Structural),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyRange {
    pub family: Family,
    pub offset: u32,
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    version: String,
    families: Vec<FamilyRange>,
    structural: Vec<(Structural, u32)>,
    total_size: u32,
}

impl Vocab {
    pub fn build(config: &VocabConfig) -> Result<Self, GrammarError> {
        let mut offset = 0u32;
        let mut families = Vec::with_capacity(Family::ALL.len());
        for family in Family::ALL {
            let size = config.get(family);
            if size == 0 {
                return Err(GrammarError::EmptyFamily);
            }
            let size = size as u32;
            families.push(FamilyRange { family, offset, size });
            offset += size;
        }
        let structural = Structural::ALL
            .iter()
            .enumerate()
            .map(|(i, s)| (*s, offset + i as u32))
            .collect();
        Ok(Self {
            version: VOCAB_LAYOUT_VERSION.to_string(),
            families,
            structural,
            total_size: offset + Structural::ALL.len() as u32,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn total_size(&self) -> u32 {
        self.total_size
    }

    pub fn family_range(&self, family: Family) -> &FamilyRange {
        &self.families[family as usize]
    }

    pub fn structural_id(&self, s: Structural) -> u32 {
        self.structural[s as usize].1
    }

    pub fn value_id(&self, family: Family, index: u32) -> Option<u32> {
        let r = self.family_range(family);
        (index < r.size).then_some(r.offset + index)
    }

    pub fn classify(&self, id: u32) -> Option<Token> {
        if id >= self.total_size {
            return None;
        }
        let structural_base = self.structural[0].1;
        if id >= structural_base {
            return Some(Token::Structural(Structural::ALL[(id - structural_base) as usize]));
        }
        // Families are contiguous and sorted by offset.
        let r = self.families.iter().rev().find(|r| id >= r.offset)?;
        Some(Token::Value(r.family, id - r.offset))
    }

    /// Checks that every family size matches the quantizer's bin count.
    pub fn check_compatible(&self, q: &QuantizerSet) -> Result<(), GrammarError> {
        for r in &self.families {
            let table = q.table(r.family).n_bins();
            if table != r.size as usize {
                return Err(GrammarError::VocabMismatch {
                    family: r.family,
                    vocab: r.size as usize,
                    table,
                });
            }
        }
        Ok(())
    }
}

/// One grounding tuple: category, normalized 2D box center, camera-frame
/// pose and an optional metric size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseTuple {
    pub category: String,
    pub box_center: [f64; 2],
    pub pose: Se3Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Vec3>,
}

impl PoseTuple {
    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.category.len() > MAX_CATEGORY_BYTES {
            return Err(GrammarError::InvalidTuple(format!(
                "category is {} bytes, limit is {MAX_CATEGORY_BYTES}",
                self.category.len()
            )));
        }
        if !self.box_center.iter().all(|c| (0.0..1.0).contains(c)) {
            return Err(GrammarError::InvalidTuple(format!(
                "box center {:?} outside [0, 1)",
                self.box_center
            )));
        }
        if let Some(size) = self.size {
            if !size.iter().all(|d| d.is_finite() && *d > 0.0) {
                return Err(GrammarError::InvalidTuple(format!("size {size:?} must be positive")));
            }
        }
        Ok(())
    }
}

/// Camera-frame waypoints with optional gripper openings in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Se3Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.waypoints.is_empty() {
            return Err(GrammarError::InvalidTrajectory("no waypoints".into()));
        }
        if let Some(g) = &self.gripper {
            if g.len() != self.waypoints.len() {
                return Err(GrammarError::InvalidTrajectory(format!(
                    "{} gripper values for {} waypoints",
                    g.len(),
                    self.waypoints.len()
                )));
            }
            if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(GrammarError::InvalidTrajectory(format!("gripper value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Item {
    Tuple(PoseTuple),
    Trajectory(Trajectory),
}

/// Serializes a grounding tuple; see the module docs for the layout.
pub fn serialize_tuple(t: &PoseTuple, v: &Vocab, q: &QuantizerSet) -> Result<Vec<u32>, GrammarError> {
    let mut out = Vec::with_capacity(16 + t.category.len());
    write_tuple(&mut out, t, v, q)?;
    Ok(out)
}

pub fn serialize_trajectory(tr: &Trajectory, v: &Vocab, q: &QuantizerSet) -> Result<Vec<u32>, GrammarError> {
    let mut out = Vec::with_capacity(2 + 8 * tr.waypoints.len());
    write_trajectory(&mut out, tr, v, q)?;
    Ok(out)
}

/// Serializes a list of items into one flat sequence.
pub fn serialize_items(items: &[Item], v: &Vocab, q: &QuantizerSet) -> Result<Vec<u32>, GrammarError> {
    let mut out = Vec::new();
    for item in items {
        match item {
            Item::Tuple(t) => write_tuple(&mut out, t, v, q)?,
            Item::Trajectory(tr) => write_trajectory(&mut out, tr, v, q)?,
        }
    }
    Ok(out)
}

fn write_pose(out: &mut Vec<u32>, idx: &PoseIndices, v: &Vocab) {
    let id = |f, i| v.value_id(f, i).expect("index within a compatible vocab");
    out.push(id(Family::TransXy, idx.trans_xy[0]));
    out.push(id(Family::TransXy, idx.trans_xy[1]));
    out.push(id(Family::TransZ, idx.trans_z));
    for r in idx.rot {
        out.push(id(Family::Rot, r));
    }
}

fn write_tuple(out: &mut Vec<u32>, t: &PoseTuple, v: &Vocab, q: &QuantizerSet) -> Result<(), GrammarError> {
    t.validate()?;
    v.check_compatible(q)?;
    if v.total_size() <= u8::MAX as u32 {
        return Err(GrammarError::InvalidTuple("vocabulary too small to carry raw bytes".into()));
    }
    let loc = q.table(Family::Loc);
    let bx = loc.encode_value(t.box_center[0])?;
    let by = loc.encode_value(t.box_center[1])?;
    let pose = q.encode_pose(&t.pose)?;
    let size = t.size.map(|s| q.encode_size(s)).transpose()?;

    let len = t.category.len();
    out.push(v.structural_id(Structural::Obj));
    out.push(v.structural_id(Structural::TextEscape));
    out.push((len >> 8) as u32);
    out.push((len & 0xff) as u32);
    out.extend(t.category.bytes().map(u32::from));
    out.push(v.value_id(Family::Loc, bx).unwrap());
    out.push(v.value_id(Family::Loc, by).unwrap());
    write_pose(out, &pose, v);
    if let Some(size) = size {
        for s in size {
            out.push(v.value_id(Family::Size, s).unwrap());
        }
    }
    out.push(v.structural_id(Structural::Sep));
    Ok(())
}

fn write_trajectory(out: &mut Vec<u32>, tr: &Trajectory, v: &Vocab, q: &QuantizerSet) -> Result<(), GrammarError> {
    tr.validate()?;
    v.check_compatible(q)?;
    out.push(v.structural_id(Structural::Traj));
    for (k, wp) in tr.waypoints.iter().enumerate() {
        let idx = q.encode_pose(wp)?;
        out.push(v.structural_id(Structural::Wp));
        write_pose(out, &idx, v);
        if let Some(g) = &tr.gripper {
            let i = q.table(Family::Loc).encode_value(g[k])?;
            out.push(v.value_id(Family::Loc, i).unwrap());
        }
    }
    out.push(v.structural_id(Structural::Eos));
    Ok(())
}

/// Parses a flat ID sequence back into tuples and trajectories.
///
/// Total on arbitrary input: every rejection is an error carrying the
/// offending token position.
pub fn parse_sequence(ids: &[u32], v: &Vocab, q: &QuantizerSet) -> Result<Vec<Item>, GrammarError> {
    v.check_compatible(q)?;
    let mut p = Parser { ids, pos: 0, v, q };
    let mut items = Vec::new();
    while p.pos < ids.len() {
        let at = p.pos;
        match p.next()? {
            Token::Structural(Structural::Obj) => items.push(Item::Tuple(p.tuple()?)),
            Token::Structural(Structural::Traj) => items.push(Item::Trajectory(p.trajectory()?)),
            _ => return Err(p.malformed(at, "<obj> or <traj>")),
        }
    }
    Ok(items)
}

struct Parser<'a> {
    ids: &'a [u32],
    pos: usize,
    v: &'a Vocab,
    q: &'a QuantizerSet,
}

impl Parser<'_> {
    fn malformed(&self, position: usize, expected: &'static str) -> GrammarError {
        GrammarError::MalformedStructure {
            position,
            expected,
            found: self.ids[position],
        }
    }

    fn raw(&mut self) -> Result<u32, GrammarError> {
        let id = *self
            .ids
            .get(self.pos)
            .ok_or(GrammarError::Truncated { position: self.pos })?;
        self.pos += 1;
        Ok(id)
    }

    fn next(&mut self) -> Result<Token, GrammarError> {
        let at = self.pos;
        let id = self.raw()?;
        self.v
            .classify(id)
            .ok_or(GrammarError::UnknownToken { position: at, id })
    }

    fn peek(&self) -> Result<Token, GrammarError> {
        let id = *self
            .ids
            .get(self.pos)
            .ok_or(GrammarError::Truncated { position: self.pos })?;
        self.v
            .classify(id)
            .ok_or(GrammarError::UnknownToken { position: self.pos, id })
    }

    fn byte(&mut self) -> Result<u8, GrammarError> {
        let at = self.pos;
        let id = self.raw()?;
        if id >= self.v.total_size() {
            return Err(GrammarError::UnknownToken { position: at, id });
        }
        u8::try_from(id).map_err(|_| self.malformed(at, "raw byte (0..=255)"))
    }

    fn value(&mut self, family: Family, expected: &'static str) -> Result<u32, GrammarError> {
        let at = self.pos;
        match self.next()? {
            Token::Value(f, i) if f == family => Ok(i),
            _ => Err(self.malformed(at, expected)),
        }
    }

    fn structural(&mut self, s: Structural, expected: &'static str) -> Result<(), GrammarError> {
        let at = self.pos;
        match self.next()? {
            Token::Structural(got) if got == s => Ok(()),
            _ => Err(self.malformed(at, expected)),
        }
    }

    fn pose(&mut self) -> Result<Se3Pose, GrammarError> {
        let idx = PoseIndices {
            trans_xy: [
                self.value(Family::TransXy, "<trans_xy>")?,
                self.value(Family::TransXy, "<trans_xy>")?,
            ],
            trans_z: self.value(Family::TransZ, "<trans_z>")?,
            rot: [
                self.value(Family::Rot, "<rot>")?,
                self.value(Family::Rot, "<rot>")?,
                self.value(Family::Rot, "<rot>")?,
            ],
        };
        Ok(self.q.decode_pose(&idx)?)
    }

    fn tuple(&mut self) -> Result<PoseTuple, GrammarError> {
        self.structural(Structural::TextEscape, "<txt>")?;
        let len = (usize::from(self.byte()?) << 8) | usize::from(self.byte()?);
        let start = self.pos;
        let mut bytes = Vec::with_capacity(len.min(self.ids.len()));
        for _ in 0..len {
            bytes.push(self.byte()?);
        }
        let category = String::from_utf8(bytes).map_err(|e| {
            let bad = start + e.utf8_error().valid_up_to();
            self.malformed(bad, "utf-8 category bytes")
        })?;

        let loc = self.q.table(Family::Loc);
        let bx = loc.decode_value(self.value(Family::Loc, "<loc>")?)?;
        let by = loc.decode_value(self.value(Family::Loc, "<loc>")?)?;
        let pose = self.pose()?;

        let at = self.pos;
        let size = match self.next()? {
            Token::Structural(Structural::Sep) => None,
            Token::Value(Family::Size, s0) => {
                let s1 = self.value(Family::Size, "<size>")?;
                let s2 = self.value(Family::Size, "<size>")?;
                self.structural(Structural::Sep, "<sep>")?;
                Some(self.q.decode_size([s0, s1, s2])?)
            }
            _ => return Err(self.malformed(at, "<size> or <sep>")),
        };
        Ok(PoseTuple {
            category,
            box_center: [bx, by],
            pose,
            size,
        })
    }

    fn trajectory(&mut self) -> Result<Trajectory, GrammarError> {
        let loc = self.q.table(Family::Loc);
        let mut waypoints = Vec::new();
        let mut gripper: Vec<f64> = Vec::new();
        let mut has_gripper = None;
        self.structural(Structural::Wp, "<wp>")?;
        loop {
            waypoints.push(self.pose()?);
            let at = self.pos;
            let tok = self.peek()?;
            let carries = matches!(tok, Token::Value(Family::Loc, _));
            match has_gripper {
                None => has_gripper = Some(carries),
                Some(expected) if expected != carries => {
                    return Err(self.malformed(
                        at,
                        if expected { "<loc> gripper token" } else { "<wp> or <eos>" },
                    ));
                }
                _ => {}
            }
            if carries {
                let i = self.value(Family::Loc, "<loc>")?;
                gripper.push(loc.decode_value(i)?);
            }
            let at = self.pos;
            match self.next()? {
                Token::Structural(Structural::Wp) => continue,
                Token::Structural(Structural::Eos) => break,
                _ => return Err(self.malformed(at, "<wp> or <eos>")),
            }
        }
        Ok(Trajectory {
            waypoints,
            gripper: has_gripper.unwrap_or(false).then_some(gripper),
        })
    }
}

/// Newline-delimited decimal IDs.
pub fn ids_to_text(ids: &[u32]) -> String {
    let mut s = String::with_capacity(ids.len() * 5);
    for id in ids {
        s.push_str(&id.to_string());
        s.push('\n');
    }
    s
}

pub fn ids_from_text(text: &str) -> Result<Vec<u32>, GrammarError> {
    let mut ids = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let id = trimmed.parse::<u32>().map_err(|e| GrammarError::TokenFile {
                byte_offset: offset,
                reason: format!("line {:?}: {e}", trimmed),
            })?;
            ids.push(id);
        }
        offset += line.len();
    }
    Ok(ids)
}

/// Little-endian `u32` array.
pub fn ids_to_le_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().flat_map(|id| id.to_le_bytes()).collect()
}

pub fn ids_from_le_bytes(bytes: &[u8]) -> Result<Vec<u32>, GrammarError> {
    if bytes.len() % 4 != 0 {
        return Err(GrammarError::TokenFile {
            byte_offset: bytes.len() - bytes.len() % 4,
            reason: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EulerAngles, UnitQuaternion};
    use proptest::prelude::*;

    fn quantizers(n: usize) -> QuantizerSet {
        let xy: Vec<f64> = (0..4 * n).map(|i| -1.0 + 2.0 * i as f64 / (4 * n) as f64).collect();
        let z: Vec<f64> = (0..4 * n).map(|i| 0.1 + 3.0 * (i as f64 / (4 * n) as f64).powi(2)).collect();
        let size: Vec<f64> = (0..4 * n).map(|i| 0.02 + i as f64 / (4 * n) as f64).collect();
        QuantizerSet::fit(&xy, &z, &size, n).unwrap()
    }

    fn setup() -> (Vocab, QuantizerSet) {
        let q = quantizers(1024);
        (Vocab::build(&VocabConfig::default()).unwrap(), q)
    }

    fn tuple(category: &str, size: Option<Vec3>) -> PoseTuple {
        PoseTuple {
            category: category.into(),
            box_center: [0.5, 0.25],
            pose: Se3Pose::from_euler([0.1, -0.2, 1.3], &EulerAngles::new(0.1, 0.2, 0.3).unwrap()).unwrap(),
            size,
        }
    }

    #[test]
    fn default_layout() {
        let v = Vocab::build(&VocabConfig::default()).unwrap();
        assert_eq!(v.total_size(), 5 * 1024 + 6);
        assert_eq!(v.family_range(Family::Loc).offset, 0);
        assert_eq!(v.family_range(Family::Rot).offset, 1024);
        assert_eq!(v.family_range(Family::Size).offset, 4096);
        assert_eq!(v.structural_id(Structural::Obj), 5120);
        assert_eq!(v.structural_id(Structural::TextEscape), 5125);
        let again = Vocab::build(&VocabConfig::default()).unwrap();
        assert_eq!(serde_json::to_vec(&v).unwrap(), serde_json::to_vec(&again).unwrap());
        assert!(Vocab::build(&VocabConfig { rot: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn ranges_are_disjoint() {
        let v = Vocab::build(&VocabConfig { loc: 3, rot: 5, trans_xy: 7, trans_z: 2, size: 300 }).unwrap();
        let mut seen = std::collections::HashSet::new();
        for id in 0..v.total_size() {
            assert!(seen.insert(v.classify(id).unwrap()));
        }
        assert_eq!(v.classify(v.total_size()), None);
    }

    #[test]
    fn tuple_layout_and_counts() {
        let (v, q) = setup();
        let ids = serialize_tuple(&tuple("mug", None), &v, &q).unwrap();
        assert_eq!(ids.len(), 3 + 13);
        assert_eq!(ids[0], v.structural_id(Structural::Obj));
        assert_eq!(&ids[2..7], &[0, 3, b'm' as u32, b'u' as u32, b'g' as u32]);
        // Box center (0.5, 0.25) under 1024 uniform bins: floor(0.5·1024) = 512.
        assert_eq!(ids[7], 512);
        assert_eq!(ids[8], 256);
        let between = &ids[7..ids.len() - 1];
        assert_eq!(between.len(), 2 + 3 + 3);
        assert_eq!(*ids.last().unwrap(), v.structural_id(Structural::Sep));

        let with_size = serialize_tuple(&tuple("mug", Some([0.1, 0.2, 0.3])), &v, &q).unwrap();
        assert_eq!(with_size.len(), 3 + 13 + 3);
    }

    #[test]
    fn trajectory_counts() {
        let (v, q) = setup();
        let tr = Trajectory { waypoints: vec![Se3Pose::IDENTITY], gripper: None };
        assert_eq!(serialize_trajectory(&tr, &v, &q).unwrap().len(), 9);
        let tr = Trajectory { waypoints: vec![Se3Pose::IDENTITY; 5], gripper: Some(vec![0.5; 5]) };
        assert_eq!(serialize_trajectory(&tr, &v, &q).unwrap().len(), 2 + 5 * 8);

        let empty = Trajectory { waypoints: vec![], gripper: None };
        assert!(matches!(serialize_trajectory(&empty, &v, &q), Err(GrammarError::InvalidTrajectory(_))));
        let bad = Trajectory { waypoints: vec![Se3Pose::IDENTITY], gripper: Some(vec![]) };
        assert!(serialize_trajectory(&bad, &v, &q).is_err());
    }

    #[test]
    fn empty_sequence_parses_to_nothing() {
        let (v, q) = setup();
        assert!(parse_sequence(&[], &v, &q).unwrap().is_empty());
    }

    #[test]
    fn rot_token_in_loc_slot_is_rejected() {
        let (v, q) = setup();
        let mut ids = serialize_tuple(&tuple("cup", None), &v, &q).unwrap();
        let loc_at = 4 + 3;
        ids[loc_at] = v.value_id(Family::Rot, 10).unwrap();
        match parse_sequence(&ids, &v, &q) {
            Err(GrammarError::MalformedStructure { position, expected, .. }) => {
                assert_eq!(position, loc_at);
                assert_eq!(expected, "<loc>");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors_carry_positions() {
        let (v, q) = setup();
        let ids = serialize_tuple(&tuple("cup", None), &v, &q).unwrap();
        assert!(matches!(
            parse_sequence(&ids[..ids.len() - 1], &v, &q),
            Err(GrammarError::Truncated { position }) if position == ids.len() - 1
        ));
        assert!(matches!(
            parse_sequence(&[99_999], &v, &q),
            Err(GrammarError::UnknownToken { position: 0, id: 99_999 })
        ));
        let mut bad = ids.clone();
        bad[4] = 0xff; // invalid utf-8 start byte
        assert!(matches!(
            parse_sequence(&bad, &v, &q),
            Err(GrammarError::MalformedStructure { position: 4, .. })
        ));
        let mut bad = ids.clone();
        bad[2] = 300;
        assert!(matches!(
            parse_sequence(&bad, &v, &q),
            Err(GrammarError::MalformedStructure { position: 2, .. })
        ));
    }

    #[test]
    fn mixed_gripper_presence_is_rejected() {
        let (v, q) = setup();
        let tr = Trajectory { waypoints: vec![Se3Pose::IDENTITY; 2], gripper: Some(vec![0.1, 0.9]) };
        let mut ids = serialize_trajectory(&tr, &v, &q).unwrap();
        // Drop the second waypoint's gripper token.
        ids.remove(ids.len() - 2);
        assert!(matches!(
            parse_sequence(&ids, &v, &q),
            Err(GrammarError::MalformedStructure { expected: "<loc> gripper token", .. })
        ));
    }

    #[test]
    fn mismatched_vocab_is_rejected() {
        let q = quantizers(64);
        let v = Vocab::build(&VocabConfig::default()).unwrap();
        assert!(matches!(
            serialize_tuple(&tuple("a", None), &v, &q),
            Err(GrammarError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn token_files() {
        let ids = vec![0, 5125, 17];
        assert_eq!(ids_from_text(&ids_to_text(&ids)).unwrap(), ids);
        assert_eq!(ids_from_le_bytes(&ids_to_le_bytes(&ids)).unwrap(), ids);
        assert!(matches!(
            ids_from_le_bytes(&[1, 2, 3, 4, 5]),
            Err(GrammarError::TokenFile { byte_offset: 4, .. })
        ));
        assert!(matches!(
            ids_from_text("1\n2\nx\n"),
            Err(GrammarError::TokenFile { byte_offset: 4, .. })
        ));
    }

    fn arb_tuple() -> impl Strategy<Value = PoseTuple> {
        (
            "[a-z ]{0,12}|\\PC{0,4}",
            prop::array::uniform2(0.0..1.0f64),
            prop::array::uniform3(-0.9..0.9f64),
            (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64),
            prop::option::of(prop::array::uniform3(0.05..0.9f64)),
        )
            .prop_map(|(category, box_center, t, (r, p, y), size)| PoseTuple {
                category,
                box_center,
                pose: Se3Pose::from_euler([t[0], t[1], 0.5 + t[2].abs()], &EulerAngles::new(r, p, y).unwrap())
                    .unwrap(),
                size,
            })
    }

    proptest! {
        #[test]
        fn tuples_round_trip(tuples in prop::collection::vec(arb_tuple(), 0..4)) {
            let (v, q) = setup();
            let items: Vec<Item> = tuples.iter().cloned().map(Item::Tuple).collect();
            let ids = serialize_items(&items, &v, &q).unwrap();
            let expected_len: usize = tuples
                .iter()
                .map(|t| 13 + t.category.len() + if t.size.is_some() { 3 } else { 0 })
                .sum();
            prop_assert_eq!(ids.len(), expected_len);
            let back = parse_sequence(&ids, &v, &q).unwrap();
            prop_assert_eq!(back.len(), tuples.len());
            for (orig, item) in tuples.iter().zip(back) {
                let Item::Tuple(t) = item else { panic!("expected tuple") };
                prop_assert_eq!(&t.category, &orig.category);
                prop_assert_eq!(t.size.is_some(), orig.size.is_some());
                for a in 0..2 {
                    prop_assert!((t.box_center[a] - orig.box_center[a]).abs() <= 0.5 / 1024.0);
                }
            }
        }

        #[test]
        fn identical_indices_give_identical_sequences(t in arb_tuple()) {
            let (v, q) = setup();
            let a = serialize_tuple(&t, &v, &q).unwrap();
            let decoded = parse_sequence(&a, &v, &q).unwrap();
            let Item::Tuple(d) = &decoded[0] else { panic!() };
            prop_assert_eq!(serialize_tuple(d, &v, &q).unwrap(), a);
        }

        #[test]
        fn parser_is_total(ids in prop::collection::vec(prop_oneof![0u32..300, 5100u32..5130], 0..64)) {
            let (v, q) = setup();
            if let Err(e) = parse_sequence(&ids, &v, &q) {
                prop_assert!(e.position().is_some());
            }
        }

        #[test]
        fn trajectories_keep_order(n in 1usize..12, grip in any::<bool>(), seed in 0u64..1000) {
            let (v, q) = setup();
            let waypoints: Vec<Se3Pose> = (0..n)
                .map(|k| {
                    let x = -0.8 + 1.6 * ((seed as usize + 7 * k) % 97) as f64 / 97.0;
                    Se3Pose::new([x, 0.0, 1.0], UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], x).unwrap()).unwrap()
                })
                .collect();
            let gripper = grip.then(|| (0..n).map(|k| k as f64 / n as f64).collect());
            let tr = Trajectory { waypoints: waypoints.clone(), gripper };
            let ids = serialize_trajectory(&tr, &v, &q).unwrap();
            prop_assert_eq!(ids.len(), 2 + 7 * n + if grip { n } else { 0 });
            let back = parse_sequence(&ids, &v, &q).unwrap();
            let Item::Trajectory(t) = &back[0] else { panic!() };
            prop_assert_eq!(t.waypoints.len(), n);
            let xy = q.table(Family::TransXy);
            for (a, b) in waypoints.iter().zip(&t.waypoints) {
                let i = xy.encode_value(a.translation()[0]).unwrap();
                prop_assert!((a.translation()[0] - b.translation()[0]).abs() <= xy.bin_width(i).unwrap() / 2.0);
            }
        }
    }
}
