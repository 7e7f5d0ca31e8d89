//! Training-stream emission.
//!
//! An output directory holds three files:
//!
//! - `tokens.bin`: every example's token IDs as little-endian `u32`, back to back;
//! - `priors.bin`: one `PKR1` raster stack per example, back to back;
//! - `manifest.jsonl`: one line per example with its record ID and byte offsets.
//!
//! Records are processed in parallel chunks and written in input order, and
//! all randomness is keyed by the input ordinal, so the bytes do not depend
//! on the worker count.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::Record;
use super::resample::{camera_trajectories, HorizonSpec};
use super::IngestError;
use crate::priors::{apply_masking_policy, patchify, stack_depth_mask, DepthMap, DropFlags, MaskPolicy, PriorsError};
use crate::quantizer::QuantizerSet;
use crate::raster::{encode_raster_stack, RasterField};
use crate::vocab::{ids_from_le_bytes, ids_to_le_bytes, serialize_items, Item, Vocab};

pub const TOKENS_FILE: &str = "tokens.bin";
pub const PRIORS_FILE: &str = "priors.bin";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    #[default]
    Strict,
    SkipOnError,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorsConfig {
    pub patch: usize,
    pub policy: MaskPolicy,
}

#[derive(Clone, Debug)]
pub struct EmitConfig {
    pub horizon: HorizonSpec,
    /// View used for trajectory records; the first listed view when unset.
    pub view: Option<String>,
    /// Prior fields are written only when set.
    pub priors: Option<PriorsConfig>,
    pub error_mode: ErrorMode,
    pub jobs: usize,
    /// Directory that relative `depth_ref` paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for EmitConfig {
    fn default() -> Self {
        Self {
            horizon: HorizonSpec::default(),
            view: None,
            priors: None,
            error_mode: ErrorMode::Strict,
            jobs: 1,
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Position of the source record in the input.
    pub ordinal: u64,
    pub record_id: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub tokens_offset: u64,
    /// Number of token IDs (4 bytes each).
    pub tokens_len: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors_len: Option<u64>,
    pub flags: DropFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub ordinal: u64,
    pub record_id: Option<String>,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EmitSummary {
    pub emitted: u64,
    pub skipped: Vec<SkippedRecord>,
}

struct Bundle {
    record_id: String,
    kind: &'static str,
    view_id: Option<String>,
    instruction: Option<String>,
    tokens: Vec<u8>,
    n_tokens: usize,
    priors: Option<Vec<u8>>,
    flags: DropFlags,
}

/// Token items for a record: one tuple per annotation, or one resampled
/// trajectory per arm in the selected view.
pub fn record_items(record: &Record, config: &EmitConfig) -> Result<(Vec<Item>, Option<String>), IngestError> {
    match record {
        Record::Scene(s) => Ok((s.tuples().into_iter().map(Item::Tuple).collect(), None)),
        Record::Trajectory(t) => {
            let view_id = match &config.view {
                Some(v) => v.clone(),
                None => t.views[0].view_id.clone(),
            };
            let items = camera_trajectories(t, &view_id, &config.horizon)?
                .into_iter()
                .map(|c| Item::Trajectory(c.waypoints))
                .collect();
            Ok((items, Some(view_id)))
        }
    }
}

fn build_priors(
    record: &Record,
    view_id: Option<&str>,
    cfg: &PriorsConfig,
    base_dir: &Path,
    ordinal: u64,
) -> Result<(Vec<u8>, DropFlags), IngestError> {
    let (intrinsics, depth) = match record {
        Record::Scene(s) => {
            let depth = match &s.depth_ref {
                Some(p) => {
                    let d = DepthMap::load(base_dir.join(p))?;
                    let expected = (s.intrinsics.height() as usize, s.intrinsics.width() as usize);
                    if d.dim() != expected {
                        return Err(PriorsError::ShapeMismatch.into());
                    }
                    Some(d)
                }
                None => None,
            };
            (s.intrinsics, depth)
        }
        Record::Trajectory(t) => {
            let id = view_id.expect("trajectory items carry a view");
            let view = t.view(id).ok_or_else(|| IngestError::UnknownView(id.to_string()))?;
            (view.intrinsics, None)
        }
    };
    let masked = apply_masking_policy(Some(intrinsics.raymap()), depth, &cfg.policy, ordinal)?;
    let mut fields = Vec::new();
    if let Some(ray) = &masked.ray {
        fields.push(RasterField::from_f64("ray", patchify(ray.view(), cfg.patch)?.patches()));
    }
    if let Some(d) = &masked.depth {
        let stack = stack_depth_mask(d);
        fields.push(RasterField::from_f64("depth_mask", patchify(stack.view(), cfg.patch)?.patches()));
    }
    Ok((encode_raster_stack(&fields), masked.flags))
}

fn build_bundle(
    record: &Record,
    ordinal: u64,
    vocab: &Vocab,
    q: &QuantizerSet,
    config: &EmitConfig,
) -> Result<Bundle, IngestError> {
    let (items, view_id) = record_items(record, config)?;
    let ids = serialize_items(&items, vocab, q)?;
    let (priors, flags) = match &config.priors {
        Some(cfg) => {
            let (bytes, flags) = build_priors(record, view_id.as_deref(), cfg, &config.base_dir, ordinal)?;
            (Some(bytes), flags)
        }
        None => (None, DropFlags::default()),
    };
    let instruction = match record {
        Record::Scene(s) => s.instruction.clone(),
        Record::Trajectory(t) => Some(t.instruction.clone()),
    };
    Ok(Bundle {
        record_id: record.id().to_string(),
        kind: record.kind(),
        view_id,
        instruction,
        tokens: ids_to_le_bytes(&ids),
        n_tokens: ids.len(),
        priors,
        flags,
    })
}

fn with_context(ordinal: u64, id: Option<&str>, e: IngestError) -> IngestError {
    IngestError::Record {
        ordinal,
        id: id.map(str::to_string),
        source: Box::new(e),
    }
}

/// Writes one bundle per record into `out_dir` and returns how many were
/// emitted. In strict mode the first failure aborts with the failing
/// record's ordinal and ID; in skip mode failures are logged and counted.
pub fn emit_training_stream<I>(
    inputs: I,
    vocab: &Vocab,
    quantizers: &QuantizerSet,
    config: &EmitConfig,
    out_dir: &Path,
) -> Result<EmitSummary, IngestError>
where
    I: IntoIterator<Item = Result<Record, IngestError>>,
{
    vocab.check_compatible(quantizers)?;
    if let Some(p) = &config.priors {
        p.policy.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;

    std::fs::create_dir_all(out_dir)?;
    let mut tokens = BufWriter::new(File::create(out_dir.join(TOKENS_FILE))?);
    let mut priors = match config.priors {
        Some(_) => Some(BufWriter::new(File::create(out_dir.join(PRIORS_FILE))?)),
        None => None,
    };
    let mut manifest = BufWriter::new(File::create(out_dir.join(MANIFEST_FILE))?);
    let (mut tokens_offset, mut priors_offset) = (0u64, 0u64);
    let mut summary = EmitSummary::default();

    let mut inputs = inputs.into_iter().enumerate().peekable();
    while inputs.peek().is_some() {
        let chunk: Vec<(usize, Result<Record, IngestError>)> = inputs.by_ref().take(CHUNK).collect();
        let results: Vec<(u64, Option<String>, Result<Bundle, IngestError>)> = pool.install(|| {
            chunk
                .into_par_iter()
                .map(|(i, rec)| {
                    let ordinal = i as u64;
                    match rec {
                        Ok(r) => {
                            let id = Some(r.id().to_string());
                            (ordinal, id, build_bundle(&r, ordinal, vocab, quantizers, config))
                        }
                        Err(e) => (ordinal, None, Err(e)),
                    }
                })
                .collect()
        });
        for (ordinal, id, result) in results {
            let bundle = match result {
                Ok(b) => b,
                Err(e) => {
                    let e = with_context(ordinal, id.as_deref(), e);
                    match config.error_mode {
                        ErrorMode::Strict => return Err(e),
                        ErrorMode::SkipOnError => {
                            log::warn!("skipping {e}");
                            summary.skipped.push(SkippedRecord {
                                ordinal,
                                record_id: id,
                                error: e.root().to_string(),
                            });
                            continue;
                        }
                    }
                }
            };
            tokens.write_all(&bundle.tokens)?;
            let mut entry = ManifestEntry {
                ordinal,
                record_id: bundle.record_id,
                kind: bundle.kind.to_string(),
                view_id: bundle.view_id,
                instruction: bundle.instruction,
                tokens_offset,
                tokens_len: bundle.n_tokens as u64,
                priors_offset: None,
                priors_len: None,
                flags: bundle.flags,
            };
            tokens_offset += bundle.tokens.len() as u64;
            if let (Some(w), Some(p)) = (priors.as_mut(), bundle.priors) {
                w.write_all(&p)?;
                entry.priors_offset = Some(priors_offset);
                entry.priors_len = Some(p.len() as u64);
                priors_offset += p.len() as u64;
            }
            serde_json::to_writer(&mut manifest, &entry).map_err(std::io::Error::from)?;
            manifest.write_all(b"\n")?;
            summary.emitted += 1;
        }
    }
    tokens.flush()?;
    if let Some(w) = priors.as_mut() {
        w.flush()?;
    }
    manifest.flush()?;
    Ok(summary)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| IngestError::CorruptStream(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Splits a token file into per-example ID sequences using the manifest.
/// Errors report byte offsets into the token file.
pub fn read_stream_tokens(bytes: &[u8], manifest: &[ManifestEntry]) -> Result<Vec<Vec<u32>>, IngestError> {
    manifest
        .iter()
        .map(|m| {
            let start = m.tokens_offset as usize;
            let end = start.checked_add(4 * m.tokens_len as usize).filter(|e| *e <= bytes.len());
            let end = end.ok_or_else(|| {
                IngestError::CorruptStream(format!(
                    "record {}: tokens at byte {start} run past the end of the file ({} bytes)",
                    m.record_id,
                    bytes.len()
                ))
            })?;
            Ok(ids_from_le_bytes(&bytes[start..end])?)
        })
        .collect()
}

/// Translation and size samples for fitting the quantile tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitSamples {
    /// x and y pooled.
    pub trans_xy: Vec<f64>,
    pub trans_z: Vec<f64>,
    /// All three extents pooled.
    pub size: Vec<f64>,
}

/// Gathers the values the codec will see: annotation poses and sizes for
/// scenes, resampled camera-frame waypoints for trajectories.
pub fn collect_fit_samples<'a>(
    records: impl IntoIterator<Item = &'a Record>,
    config: &EmitConfig,
) -> Result<FitSamples, IngestError> {
    let mut s = FitSamples::default();
    for (ordinal, r) in records.into_iter().enumerate() {
        let (items, _) = record_items(r, config).map_err(|e| with_context(ordinal as u64, Some(r.id()), e))?;
        for item in &items {
            let poses: Vec<_> = match item {
                Item::Tuple(t) => {
                    if let Some(size) = t.size {
                        s.size.extend(size);
                    }
                    vec![t.pose]
                }
                Item::Trajectory(tr) => tr.waypoints.clone(),
            };
            for p in poses {
                let t = p.translation();
                s.trans_xy.extend([t[0], t[1]]);
                s.trans_z.push(t[2]);
            }
        }
    }
    Ok(s)
}
