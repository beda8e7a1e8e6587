//! Dataset generation as seen through the files it writes.

use dsfe::synth::{gen_dataset, DatasetManifest, DatasetSpec, Split, SplitCounts, Task, MANIFEST_FILE, TARGET_T60_S};
use dsfe::wav::read_wav;

fn spec(task: Task, seed: u64) -> DatasetSpec {
    DatasetSpec {
        task,
        counts: SplitCounts {
            train: 3,
            valid: 2,
            test: 2,
        },
        clip_seconds: 0.5,
        seed,
    }
}

#[test]
fn layout_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&spec(Task::Denoise, 4), dir.path(), 16_000).unwrap();
    let loaded = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.records, m.records);
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids[0], "denoise_0000");
    assert_eq!(ids[6], "denoise_0006");
    assert_eq!(m.split(Split::Train).count(), 3);
    assert_eq!(m.split(Split::Valid).count(), 2);
    assert_eq!(m.split(Split::Test).count(), 2);
    for r in &m.records {
        assert!(r.mixture_path.starts_with(r.split.as_str()));
        assert!(r.mixture_path.ends_with("_mix.wav"));
        assert!(r.target_path.ends_with("_ref.wav"));
        assert!(r.interference_path.as_deref().unwrap().ends_with("_int.wav"));
        assert!(r.metadata.snr_db.is_some() && r.metadata.t60_s.is_none());
    }
}

#[test]
fn denoise_files_compose_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&spec(Task::Denoise, 9), dir.path(), 16_000).unwrap();
    for r in &m.records {
        let mix = read_wav(m.resolve(&r.mixture_path)).unwrap();
        let clean = read_wav(m.resolve(&r.target_path)).unwrap();
        let noise = read_wav(m.resolve(r.interference_path.as_deref().unwrap())).unwrap();
        assert_eq!(mix.len(), 8000);
        for ((x, s), n) in mix.samples.iter().zip(&clean.samples).zip(&noise.samples) {
            assert_eq!((x - n).to_bits(), s.to_bits());
        }
        let snr = 10.0 * (clean.energy() / noise.energy()).log10();
        assert!((snr - r.metadata.snr_db.unwrap()).abs() < 0.01, "{snr}");
    }
}

#[test]
fn dereverb_records_carry_room_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&spec(Task::Dereverb, 2), dir.path(), 16_000).unwrap();
    for r in &m.records {
        let t60 = r.metadata.t60_s.unwrap();
        assert!((0.4..=1.0).contains(&t60) && t60 > TARGET_T60_S);
        assert!((-8.3..=-2.3).contains(&r.metadata.drr_db.unwrap()));
        assert!(r.interference_path.is_none());
        let mix = read_wav(m.resolve(&r.mixture_path)).unwrap();
        let target = read_wav(m.resolve(&r.target_path)).unwrap();
        assert_eq!(mix.len(), target.len());
        // The shortened room keeps less energy than the full one.
        assert!(target.energy() < mix.energy());
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&spec(Task::Dereverb, 7), a.path(), 16_000).unwrap();
    gen_dataset(&spec(Task::Dereverb, 7), b.path(), 16_000).unwrap();
    gen_dataset(&spec(Task::Dereverb, 8), c.path(), 16_000).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
    assert_eq!(read(a.path(), "test/dereverb_0006_mix.wav"), read(b.path(), "test/dereverb_0006_mix.wav"));
    assert_ne!(read(a.path(), "test/dereverb_0006_mix.wav"), read(c.path(), "test/dereverb_0006_mix.wav"));
}

#[test]
fn invalid_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(Task::Denoise, 1);
    s.clip_seconds = 0.0;
    assert!(gen_dataset(&s, dir.path(), 16_000).is_err());
    let mut s = spec(Task::Denoise, 1);
    s.counts = SplitCounts {
        train: 0,
        valid: 0,
        test: 0,
    };
    assert!(gen_dataset(&s, dir.path(), 16_000).is_err());
}
