use prosodet::audio_io::{read_wav, write_wav, AudioBuffer};
use prosodet::features::corpus::{generate_corpus, synthesize, CorpusSpec};
use prosodet::features::{apply_scaler, extract_features, fit_scaler, FeatureSequence, Label};
use prosodet::neural::{predict_file, train, ModelBundle, ModelConfig, Preset, TrainConfig};
use prosodet::pitch::PitchParams;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(root: &std::path::Path, entries: &[prosodet::features::ProtocolEntry]) -> Vec<FeatureSequence> {
    entries
        .iter()
        .map(|e| {
            let buf = read_wav(root.join(&e.path)).unwrap();
            let mut s = extract_features(&buf, &PitchParams::default(), 100).unwrap();
            s.label = e.label;
            s.utterance_id = e.utterance_id.clone();
            s
        })
        .collect()
}

#[test]
fn trained_bundle_labels_fresh_clips_of_each_class() {
    let dir = tempfile::tempdir().unwrap();
    let splits = generate_corpus(&CorpusSpec::with_counts(30, 10, 0), 11, dir.path()).unwrap();
    let tr = features(dir.path(), &splits[0].entries);
    let va = features(dir.path(), &splits[1].entries);
    let scaler = fit_scaler(&tr).unwrap();
    let scale = |v: &[FeatureSequence]| v.iter().map(|s| apply_scaler(s, &scaler).unwrap()).collect::<Vec<_>>();
    let tc = TrainConfig {
        epochs: 30,
        learning_rate: 3e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&ModelConfig::preset(Preset::E), &scale(&tr), &scale(&va), &tc).unwrap();

    let bundle = ModelBundle::new(&out.best_model, scaler.clone(), PitchParams::default(), 100, tc.seed);
    let path = dir.path().join("bundle.json");
    bundle.save(&path).unwrap();
    let bundle = ModelBundle::load(&path).unwrap();
    let model = bundle.model().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut correct = 0;
    for i in 0..10 {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Deepfake };
        let clip = AudioBuffer::new(synthesize(label, 1.3, 16000, &mut rng), 16000, format!("fresh{i}"));
        let p = predict_file(&model, &bundle, &clip, &bundle.pitch).unwrap();
        assert!((0.0..=1.0).contains(&p.score));
        correct += (p.label == label) as usize;
    }
    assert!(correct >= 9, "{correct}/10 fresh clips labelled correctly");
}

#[test]
fn corpus_generation_is_seeded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = CorpusSpec::with_counts(2, 1, 1);
    let sa = generate_corpus(&spec, 5, a.path()).unwrap();
    let sb = generate_corpus(&spec, 5, b.path()).unwrap();
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.entries, y.entries);
        for e in &x.entries {
            assert_eq!(std::fs::read(a.path().join(&e.path)).unwrap(), std::fs::read(b.path().join(&e.path)).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn wav_round_trip_is_within_half_a_step(samples in prop::collection::vec(-1.0f64..1.0, 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &AudioBuffer::new(samples.clone(), 8000, "x")).unwrap();
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.sample_rate, 8000);
        prop_assert_eq!(back.samples.len(), samples.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12 || *a > 32767.0 / 32768.0);
        }
    }
}
