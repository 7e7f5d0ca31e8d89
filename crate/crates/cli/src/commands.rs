use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use serde::Serialize;

use posekit::eval3d::{self, Detection, IouConfig};
use posekit::geometry::CameraIntrinsics;
use posekit::ingest::{
    self, CameraFrameTrajectory, EmitConfig, ErrorMode, HorizonSpec, IngestError, PriorsConfig, ReadRecord, Record,
};
use posekit::priors::{self, DepthMap, MaskPolicy};
use posekit::quantizer::{self, Family, QuantizerSet};
use posekit::raster::{encode_raster_stack, RasterField};
use posekit::vocab::{self, Item, Vocab, VocabConfig};

use crate::exit::{self, ingest_code, priors_code, quantize_code, CliError, WithCode};
use crate::Global;

#[derive(Args, Debug)]
pub struct HorizonArgs {
    /// Waypoints per resampled trajectory.
    #[arg(long, default_value_t = ingest::DEFAULT_HORIZON)]
    horizon: usize,
    /// Seconds between waypoints.
    #[arg(long, default_value_t = ingest::DEFAULT_DT)]
    dt: f64,
}

impl HorizonArgs {
    fn spec(&self) -> HorizonSpec {
        HorizonSpec {
            horizon: self.horizon,
            dt: self.dt,
        }
    }
}

#[derive(Args, Debug)]
pub struct FitBinsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = quantizer::DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
    /// View whose camera frame trajectory samples are taken in.
    #[arg(long)]
    view: Option<String>,
    #[command(flatten)]
    horizon: HorizonArgs,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `tokens.bin` and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    view: Option<String>,
    #[command(flatten)]
    horizon: HorizonArgs,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// A directory written by `encode`/`emit`, or a bare little-endian u32 token file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Only this view; every view when omitted.
    #[arg(long)]
    view: Option<String>,
    #[command(flatten)]
    horizon: HorizonArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PriorsArgs {
    /// JSON camera intrinsics.
    #[arg(long)]
    intrinsics: PathBuf,
    /// 16-bit PNG in millimeters or a `.pkr` float raster in meters.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, default_value_t = 14)]
    patch: usize,
    /// e.g. `p_ray=0.5,p_depth=0.5,keep=0.25`.
    #[arg(long)]
    mask_policy: Option<String>,
    /// Random stream index for the masking policy.
    #[arg(long, default_value_t = 0)]
    index: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 14)]
    patch: usize,
    #[arg(long)]
    mask_policy: Option<String>,
    #[arg(long)]
    view: Option<String>,
    #[command(flatten)]
    horizon: HorizonArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = eval3d::DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    /// Where to write the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    input: PathBuf,
}

fn error_mode(g: &Global) -> ErrorMode {
    if g.skip_on_error {
        ErrorMode::SkipOnError
    } else {
        ErrorMode::Strict
    }
}

fn read_records(path: &Path) -> Result<Vec<ReadRecord>, CliError> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ingest::read_records(BufReader::new(file)).code(exit::GENERAL)
}

/// Strict mode: fail on the first unparsable record with its line number.
fn check_records(records: &[ReadRecord], g: &Global) -> Result<(), CliError> {
    if error_mode(g) == ErrorMode::SkipOnError {
        return Ok(());
    }
    for r in records {
        if let Err(e) = &r.record {
            return Err(CliError::new(ingest_code(e), anyhow!("line {}: {e}", r.line)));
        }
    }
    Ok(())
}

/// Valid records only, logging the rest.
fn valid_records(records: Vec<ReadRecord>) -> Vec<Record> {
    records
        .into_iter()
        .filter_map(|r| match r.record {
            Ok(rec) => Some(rec),
            Err(e) => {
                log::warn!("skipping line {}: {e}", r.line);
                None
            }
        })
        .collect()
}

/// Maps a stream error back to the input line it came from.
fn stream_error(e: IngestError, records_lines: &[usize]) -> CliError {
    let code = ingest_code(&e);
    match &e {
        IngestError::Record { ordinal, .. } => {
            let line = records_lines.get(*ordinal as usize).copied().unwrap_or(0);
            CliError::new(code, anyhow!("line {line}: {e}"))
        }
        _ => CliError::new(code, e),
    }
}

fn load_codec(g: &Global) -> Result<(Vocab, QuantizerSet), CliError> {
    let path = g
        .quantizers
        .as_ref()
        .ok_or_else(|| anyhow!("no bin tables given; pass --quantizers or set POSEKIT_QUANTIZERS"))?;
    let q = quantizer::load_quantizers(path)
        .with_context(|| format!("loading bin tables from {}", path.display()))?;
    let config = match &g.vocab_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<VocabConfig>(&text)
                .with_context(|| format!("vocabulary config {}", p.display()))
                .code(exit::SCHEMA)?
        }
        None => VocabConfig::from_quantizers(&q),
    };
    let v = Vocab::build(&config).code(exit::SCHEMA)?;
    v.check_compatible(&q).code(exit::SCHEMA)?;
    Ok((v, q))
}

fn parse_mask_policy(spec: Option<&str>, seed: u64) -> Result<MaskPolicy, CliError> {
    let mut policy = MaskPolicy::passthrough(seed);
    if let Some(spec) = spec {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| anyhow!("mask policy entry {part:?} is not key=value"))
                .code(exit::SCHEMA)?;
            let value: f64 = value
                .trim()
                .parse()
                .with_context(|| format!("mask policy value for {key:?}"))
                .code(exit::SCHEMA)?;
            match key.trim() {
                "p_ray" | "p_drop_ray" => policy.p_drop_ray = value,
                "p_depth" | "p_drop_depth" => policy.p_drop_depth = value,
                "keep" | "sparse_keep_fraction" => policy.sparse_keep_fraction = value,
                other => return Err(CliError::new(exit::SCHEMA, anyhow!("unknown mask policy key {other:?}"))),
            }
        }
    }
    policy.validate().code(exit::SCHEMA)?;
    Ok(policy)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value).context("writing JSON")?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct FamilySummary {
    samples: usize,
    expected_per_bin: f64,
    min_count: u64,
    max_count: u64,
    entropy_bits: f64,
    entropy_ratio: f64,
}

pub fn fit_bins(g: &Global, a: FitBinsArgs) -> Result<(), CliError> {
    let records = read_records(&a.input)?;
    check_records(&records, g)?;
    let lines: Vec<usize> = records.iter().filter(|r| r.record.is_ok()).map(|r| r.line).collect();
    let records = valid_records(records);
    let config = EmitConfig {
        horizon: a.horizon.spec(),
        view: a.view.clone(),
        ..EmitConfig::default()
    };
    let samples = ingest::collect_fit_samples(&records, &config).map_err(|e| stream_error(e, &lines))?;
    let q = QuantizerSet::fit(&samples.trans_xy, &samples.trans_z, &samples.size, a.bins)
        .map_err(|e| CliError::new(quantize_code(&e), e))?;
    quantizer::save_quantizers(&q, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;

    let mut summary = BTreeMap::new();
    for (family, data) in [
        (Family::TransXy, &samples.trans_xy),
        (Family::TransZ, &samples.trans_z),
        (Family::Size, &samples.size),
    ] {
        let counts = quantizer::occupancy(q.table(family), data).context("computing occupancy")?;
        let entropy = quantizer::entropy_bits(&counts);
        summary.insert(
            family.name(),
            FamilySummary {
                samples: data.len(),
                expected_per_bin: data.len() as f64 / a.bins as f64,
                min_count: counts.iter().copied().min().unwrap_or(0),
                max_count: counts.iter().copied().max().unwrap_or(0),
                entropy_bits: entropy,
                entropy_ratio: entropy / (a.bins as f64).log2().max(f64::MIN_POSITIVE),
            },
        );
    }
    for (name, s) in &summary {
        eprintln!(
            "{name:>8}: {} samples, occupancy {}..{} (expected {:.2}), entropy {:.4} bits ({:.4} of max)",
            s.samples, s.min_count, s.max_count, s.expected_per_bin, s.entropy_bits, s.entropy_ratio
        );
    }
    if g.json {
        print_json(&serde_json::json!({ "bins": a.bins, "out": a.out, "families": summary }))?;
    }
    Ok(())
}

fn run_stream(
    g: &Global,
    input: &Path,
    out: &Path,
    config: EmitConfig,
) -> Result<ingest::EmitSummary, CliError> {
    let (v, q) = load_codec(g)?;
    let records = read_records(input)?;
    check_records(&records, g)?;
    let lines: Vec<usize> = records.iter().map(|r| r.line).collect();
    let summary = ingest::emit_training_stream(records.into_iter().map(|r| r.record), &v, &q, &config, out)
        .map_err(|e| stream_error(e, &lines))?;
    for s in &summary.skipped {
        eprintln!("skipped line {}: {}", lines[s.ordinal as usize], s.error);
    }
    eprintln!("emitted {} examples, skipped {}", summary.emitted, summary.skipped.len());
    if g.json {
        print_json(&summary)?;
    }
    Ok(summary)
}

fn base_dir(input: &Path) -> PathBuf {
    input.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn encode(g: &Global, a: EncodeArgs) -> Result<(), CliError> {
    let config = EmitConfig {
        horizon: a.horizon.spec(),
        view: a.view,
        priors: None,
        error_mode: error_mode(g),
        jobs: g.jobs as usize,
        base_dir: base_dir(&a.input),
    };
    run_stream(g, &a.input, &a.out, config).map(|_| ())
}

pub fn emit(g: &Global, a: EmitArgs) -> Result<(), CliError> {
    let policy = parse_mask_policy(a.mask_policy.as_deref(), g.seed)?;
    let config = EmitConfig {
        horizon: a.horizon.spec(),
        view: a.view,
        priors: Some(PriorsConfig { patch: a.patch, policy }),
        error_mode: error_mode(g),
        jobs: g.jobs as usize,
        base_dir: base_dir(&a.input),
    };
    run_stream(g, &a.input, &a.out, config).map(|_| ())
}

#[derive(Serialize)]
struct DecodedRecord<'a> {
    record_id: &'a str,
    items: Vec<Item>,
}

pub fn decode(g: &Global, a: DecodeArgs) -> Result<(), CliError> {
    let (v, q) = load_codec(g)?;
    let (bytes, manifest) = if a.input.is_dir() {
        let manifest = ingest::read_manifest(&a.input.join(ingest::MANIFEST_FILE)).code(exit::TOKEN_STREAM)?;
        let bytes = std::fs::read(a.input.join(ingest::TOKENS_FILE)).context("reading token file")?;
        (bytes, Some(manifest))
    } else {
        (std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?, None)
    };
    let sequences: Vec<(String, u64, Vec<u32>)> = match &manifest {
        Some(m) => ingest::read_stream_tokens(&bytes, m)
            .code(exit::TOKEN_STREAM)?
            .into_iter()
            .zip(m)
            .map(|(ids, e)| (e.record_id.clone(), e.tokens_offset, ids))
            .collect(),
        None => vec![(String::new(), 0, vocab::ids_from_le_bytes(&bytes).code(exit::TOKEN_STREAM)?)],
    };

    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut n_items = 0;
    for (record_id, offset, ids) in &sequences {
        let items = vocab::parse_sequence(ids, &v, &q).map_err(|e| {
            let at = offset + 4 * e.position().unwrap_or(0) as u64;
            CliError::new(
                exit::TOKEN_STREAM,
                anyhow!("malformed token stream at byte offset {at} (record {record_id:?}): {e}"),
            )
        })?;
        n_items += items.len();
        serde_json::to_writer(&mut out, &DecodedRecord { record_id, items }).context("writing output")?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    eprintln!("decoded {} sequences, {n_items} items", sequences.len());
    if g.json {
        print_json(&serde_json::json!({ "sequences": sequences.len(), "items": n_items }))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProjectedLine<'a> {
    record_id: &'a str,
    #[serde(flatten)]
    trajectory: CameraFrameTrajectory,
}

pub fn project(g: &Global, a: ProjectArgs) -> Result<(), CliError> {
    let records = read_records(&a.input)?;
    check_records(&records, g)?;
    let spec = a.horizon.spec();
    spec.validate().map_err(|e| CliError::new(ingest_code(&e), e))?;
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let (mut written, mut skipped) = (0usize, 0usize);
    for r in records {
        let line = r.line;
        let result = r.record.and_then(|rec| {
            let Record::Trajectory(t) = &rec else {
                return Err(IngestError::Schema {
                    path: "/schema_version".into(),
                    message: format!("expected \"{}\"", ingest::TRAJECTORY_SCHEMA),
                });
            };
            let views: Vec<String> = match &a.view {
                Some(v) => vec![v.clone()],
                None => t.views.iter().map(|v| v.view_id.clone()).collect(),
            };
            let mut outs = Vec::new();
            for view in &views {
                outs.extend(ingest::camera_trajectories(t, view, &spec)?);
            }
            Ok((rec.id().to_string(), outs))
        });
        match result {
            Ok((id, trajectories)) => {
                for trajectory in trajectories {
                    serde_json::to_writer(&mut out, &ProjectedLine { record_id: &id, trajectory })
                        .context("writing output")?;
                    out.write_all(b"\n")?;
                    written += 1;
                }
            }
            Err(e) if error_mode(g) == ErrorMode::SkipOnError => {
                log::warn!("skipping line {line}: {e}");
                skipped += 1;
            }
            Err(e) => return Err(CliError::new(ingest_code(&e), anyhow!("line {line}: {e}"))),
        }
    }
    out.flush()?;
    eprintln!("wrote {written} trajectories, skipped {skipped} records");
    if g.json {
        print_json(&serde_json::json!({ "trajectories": written, "skipped": skipped }))?;
    }
    Ok(())
}

pub fn priors(g: &Global, a: PriorsArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.intrinsics).with_context(|| format!("reading {}", a.intrinsics.display()))?;
    let k: CameraIntrinsics = serde_json::from_str(&text)
        .with_context(|| format!("intrinsics {}", a.intrinsics.display()))
        .code(exit::SCHEMA)?;
    let depth = match &a.depth {
        Some(p) => {
            let d = DepthMap::load(p).map_err(|e| CliError::new(priors_code(&e), e))?;
            if d.dim() != (k.height() as usize, k.width() as usize) {
                return Err(CliError::new(
                    exit::SHAPE,
                    anyhow!("depth is {:?} but intrinsics are {}x{}", d.dim(), k.height(), k.width()),
                ));
            }
            Some(d)
        }
        None => None,
    };
    let policy = parse_mask_policy(a.mask_policy.as_deref(), g.seed)?;
    let masked = priors::apply_masking_policy(Some(k.raymap()), depth, &policy, a.index)
        .map_err(|e| CliError::new(priors_code(&e), e))?;

    let mut fields = Vec::new();
    let mut patches = 0;
    if let Some(ray) = &masked.ray {
        let grid = priors::patchify(ray.view(), a.patch).map_err(|e| CliError::new(priors_code(&e), e))?;
        patches = grid.num_patches();
        fields.push(RasterField::from_f64("ray", grid.patches()));
    }
    if let Some(d) = &masked.depth {
        let stack = priors::stack_depth_mask(d);
        let grid = priors::patchify(stack.view(), a.patch).map_err(|e| CliError::new(priors_code(&e), e))?;
        fields.push(RasterField::from_f64("depth_mask", grid.patches()));
    }
    std::fs::write(&a.out, encode_raster_stack(&fields)).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("{} fields, {patches} patches each", fields.len());
    if g.json {
        print_json(&serde_json::json!({
            "patch": a.patch,
            "patches": patches,
            "fields": fields.iter().map(|f| serde_json::json!({"name": f.name, "shape": f.data.shape()})).collect::<Vec<_>>(),
            "flags": masked.flags,
        }))?;
    }
    Ok(())
}

fn read_detections(path: &Path, g: &Global) -> Result<Vec<Detection>, CliError> {
    let records = read_records(path)?;
    check_records(&records, g)?;
    let mut out = Vec::new();
    for r in records {
        match r.record {
            Ok(Record::Scene(s)) => {
                let dets = eval3d::detections_from_scene(&s)
                    .map_err(|e| CliError::new(exit::SCHEMA, anyhow!("{}: line {}: {e}", path.display(), r.line)))?;
                out.extend(dets);
            }
            Ok(Record::Trajectory(_)) => {
                return Err(CliError::new(
                    exit::SCHEMA,
                    anyhow!("{}: line {}: expected a scene record", path.display(), r.line),
                ))
            }
            Err(e) => log::warn!("skipping {} line {}: {e}", path.display(), r.line),
        }
    }
    Ok(out)
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<(), CliError> {
    let preds = read_detections(&a.pred, g)?;
    let gts = read_detections(&a.gt, g)?;
    let iou = IouConfig {
        seed: g.seed,
        ..IouConfig::default()
    };
    let report = eval3d::evaluate(&preds, &gts, a.iou, &iou).code(exit::SCHEMA)?;
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&report).context("serializing report")?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    for (cat, c) in &report.per_category {
        let ap = c.ap.map_or("-".to_string(), |ap| format!("{ap:.4}"));
        eprintln!("{cat:>20}  AP {ap}  gt {}  tp {}  fp {}  fn {}", c.n_gt, c.tp, c.fp, c.fn_);
    }
    if g.json {
        print_json(&report)?;
    } else {
        println!("mAP@{}: {:.6}", a.iou, report.map_at_threshold);
    }
    Ok(())
}

#[derive(Serialize)]
struct ValidationError {
    line: usize,
    error: String,
}

pub fn validate(g: &Global, a: ValidateArgs) -> Result<(), CliError> {
    let records = read_records(&a.input)?;
    let mut errors = Vec::new();
    let mut first_code = None;
    for r in &records {
        if let Err(e) = &r.record {
            first_code.get_or_insert(ingest_code(e));
            eprintln!("line {}: {e}", r.line);
            errors.push(ValidationError {
                line: r.line,
                error: e.to_string(),
            });
        }
    }
    let valid = records.len() - errors.len();
    eprintln!("{valid} valid, {} invalid", errors.len());
    if g.json {
        print_json(&serde_json::json!({ "valid": valid, "invalid": errors.len(), "errors": errors }))?;
    }
    match first_code {
        Some(code) if error_mode(g) == ErrorMode::Strict => Err(CliError::new(
            code,
            anyhow!("{} of {} records are invalid", errors.len(), records.len()),
        )),
        _ => Ok(()),
    }
}
