//! End-to-end checks across module boundaries: records in, training
//! stream out, and everything read back.

use std::io::Cursor;

use proptest::prelude::*;

use posekit::ingest::{
    collect_fit_samples, emit_training_stream, read_manifest, read_records, read_stream_tokens, record_items,
    EmitConfig, PriorsConfig, MANIFEST_FILE, PRIORS_FILE, TOKENS_FILE,
};
use posekit::priors::MaskPolicy;
use posekit::quantizer::{Family, QuantizerSet};
use posekit::raster::decode_raster_stack;
use posekit::vocab::{parse_sequence, Item, Vocab, VocabConfig};

const SCENES: &str = include_str!("../../cli/tests/fixtures/scenes.jsonl");
const TRAJECTORIES: &str = include_str!("../../cli/tests/fixtures/trajectories.jsonl");

fn corpus() -> String {
    let scenes: Vec<&str> = SCENES.lines().take(30).collect();
    let trajs: Vec<&str> = TRAJECTORIES.lines().take(4).collect();
    format!("{}\n{}\n", scenes.join("\n"), trajs.join("\n"))
}

fn fitted(config: &EmitConfig) -> (Vocab, QuantizerSet) {
    let records: Vec<_> = read_records(Cursor::new(corpus()))
        .unwrap()
        .into_iter()
        .map(|r| r.record.unwrap())
        .collect();
    let s = collect_fit_samples(&records, config).unwrap();
    let q = QuantizerSet::fit(&s.trans_xy, &s.trans_z, &s.size, 64).unwrap();
    (Vocab::build(&VocabConfig::from_quantizers(&q)).unwrap(), q)
}

#[test]
fn emitted_stream_reads_back_record_by_record() {
    let config = EmitConfig {
        priors: Some(PriorsConfig {
            patch: 14,
            policy: MaskPolicy::new(0.5, 0.0, 0.5, 3).unwrap(),
        }),
        jobs: 3,
        ..EmitConfig::default()
    };
    let (v, q) = fitted(&config);
    let dir = tempfile::tempdir().unwrap();
    let records = read_records(Cursor::new(corpus())).unwrap();
    let expected: Vec<Vec<Item>> = records
        .iter()
        .map(|r| record_items(r.record.as_ref().unwrap(), &config).unwrap().0)
        .collect();
    let summary =
        emit_training_stream(records.into_iter().map(|r| r.record), &v, &q, &config, dir.path()).unwrap();
    assert_eq!(summary.emitted, 34);

    let manifest = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    let tokens = std::fs::read(dir.path().join(TOKENS_FILE)).unwrap();
    let priors = std::fs::read(dir.path().join(PRIORS_FILE)).unwrap();
    let per_record = read_stream_tokens(&tokens, &manifest).unwrap();

    for ((entry, ids), items) in manifest.iter().zip(&per_record).zip(&expected) {
        let decoded = parse_sequence(ids, &v, &q).unwrap();
        assert_eq!(decoded.len(), items.len(), "{}", entry.record_id);
        for (a, b) in decoded.iter().zip(items) {
            match (a, b) {
                (Item::Tuple(a), Item::Tuple(b)) => assert_eq!(a.category, b.category),
                (Item::Trajectory(a), Item::Trajectory(b)) => assert_eq!(a.waypoints.len(), b.waypoints.len()),
                _ => panic!("item kind changed for {}", entry.record_id),
            }
        }

        let (off, len) = (entry.priors_offset.unwrap() as usize, entry.priors_len.unwrap() as usize);
        let fields = decode_raster_stack(&priors[off..off + len]).unwrap();
        let names: Vec<&str> = fields.iter().map(|f| f.name.as_str()).collect();
        // The fixtures carry no depth, so only the raymap is present.
        assert_eq!(names, ["ray"]);
        // Scenes are 224x224, trajectory views 28x28.
        let patches = if entry.kind == "scene" { 256 } else { 4 };
        assert_eq!(fields[0].data.dim(), (patches, 14 * 14 * 3));
        let ray_is_zero = fields[0].data.iter().all(|v| *v == 0.0);
        assert_eq!(ray_is_zero, entry.flags.ray_dropped);
    }
}

#[test]
fn trajectory_only_corpus_has_no_size_samples() {
    let records: Vec<_> = read_records(Cursor::new(TRAJECTORIES))
        .unwrap()
        .into_iter()
        .map(|r| r.record.unwrap())
        .collect();
    let s = collect_fit_samples(&records, &EmitConfig::default()).unwrap();
    assert!(s.size.is_empty());
    assert_eq!(s.trans_xy.len(), 2 * s.trans_z.len());
    assert!(QuantizerSet::fit(&s.trans_xy, &s.trans_z, &s.size, 64).is_err());
}

proptest! {
    #[test]
    fn bin_tables_survive_serialization(
        xs in prop::collection::vec(-1e3f64..1e3, 64..200),
        n_bins in 1usize..64,
    ) {
        let q = QuantizerSet::fit(&xs, &xs, &xs, n_bins).unwrap();
        let back = QuantizerSet::from_bytes(&q.to_bytes()).unwrap();
        prop_assert_eq!(&back, &q);
        for x in &xs {
            let t = back.table(Family::TransXy);
            prop_assert_eq!(t.encode_value(*x).unwrap(), q.table(Family::TransXy).encode_value(*x).unwrap());
        }
    }
}
