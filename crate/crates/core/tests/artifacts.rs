use voxface::dataset::SplitAssignment;
use voxface::estimator::{train, Checkpoint, TrainConfig};
use voxface::features::{read_feature_cache, read_wav, CANONICAL_RATE};
use voxface::geometry::{compute_all_ams, read_am_csv, read_am_definitions, read_landmarks, read_obj, write_am_csv};
use voxface::shapespace::{build_basis, ShapeBasis};
use voxface::synthdata::{generate, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        n_speakers: 40,
        vertices: 120,
        frames_per_recording: 24,
        waveform_samples: 512,
        seed: 11,
        ..SynthConfig::default()
    }
}

#[test]
fn emitted_dataset_reads_back() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.emit(dir.path()).unwrap();

    let lm = read_landmarks(&dir.path().join("landmarks.txt")).unwrap();
    let defs = read_am_definitions(&dir.path().join("ams.txt")).unwrap();
    assert_eq!(defs, ds.definitions);
    let topo = &ds.template.topology_id;
    for s in ds.speakers.iter().take(5) {
        let mesh = read_obj(&dir.path().join(format!("meshes/{}.obj", s.id)), topo).unwrap();
        let ams = compute_all_ams(&mesh, &lm, &defs).unwrap();
        for (a, b) in ams.values.iter().zip(&s.ams.values) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    let r = &ds.recordings[3];
    let f = &r.features;
    let back = read_feature_cache(&dir.path().join(format!("features/{}.mel", r.id)), f.frame_hop, f.window).unwrap();
    assert_eq!(back.data, f.data);
    let wav = read_wav(&dir.path().join(format!("audio/{}.wav", r.id)), CANONICAL_RATE).unwrap();
    assert_eq!(wav.samples.len(), r.waveform.as_ref().unwrap().len());
    let splits = SplitAssignment::read(&dir.path().join("splits.csv")).unwrap();
    assert_eq!(splits, ds.splits);
}

#[test]
fn am_table_and_basis_round_trip() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<_> = ds.speakers.iter().map(|s| (s.id.clone(), s.ams.clone())).collect();
    let path = dir.path().join("ams.csv");
    write_am_csv(&path, &ds.am_ids(), &rows).unwrap();
    let (ids, back) = read_am_csv(&path).unwrap();
    assert_eq!(ids, ds.am_ids());
    assert_eq!(back, rows);

    let meshes: Vec<_> = ds.speakers.iter().map(|s| s.mesh.clone()).collect();
    let basis = build_basis(&meshes, 10).unwrap();
    let bpath = dir.path().join("basis.bin");
    basis.save(&bpath).unwrap();
    let loaded = ShapeBasis::load(&bpath, &basis.topology_id).unwrap();
    assert_eq!(loaded.to_bytes(), basis.to_bytes());
}

#[test]
fn trained_checkpoint_round_trips() {
    let ds = generate(&small()).unwrap();
    let data = ds.prepare().unwrap();
    let cfg = TrainConfig {
        iterations: 12,
        batch_size: 4,
        warmup: 4,
        min_frames: 13,
        max_frames: 16,
        eval_frames: 20,
        eval_every: 6,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let out = train(
        &data.labeled(voxface::dataset::Split::Train),
        &data.labeled(voxface::dataset::Split::Select),
        &cfg,
    )
    .unwrap();
    let ckpt = Checkpoint {
        config_hash: "abc".into(),
        seed: 1,
        model: out.model,
        mel_norm: data.mel_norm.clone(),
        am_norm: data.am_norm.clone(),
        selected_iteration: out.selected_iteration,
        selection_error: out.selection_error,
        phonatory: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    assert_eq!(back.am_ids(), data.am_ids.as_slice());
}
