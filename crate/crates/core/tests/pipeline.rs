mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oabtg::aggregation::{AssignmentMode, FeatureMap, VladModel};
use oabtg::dataio::{build_vocabulary, load_manifest, random_video, synthesize_dataset, SynthSpec, VideoDims};
use oabtg::inference::{caption_video, FusionMode};
use oabtg::model::FeatureShape;
use oabtg::training::{fit, Checkpoint, Corpus, FitOptions, TrainConfig};
use oabtg::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small_spec() -> SynthSpec {
    SynthSpec {
        num_videos: 3,
        frames: 3,
        channels: 4,
        appearance: 4,
        ..SynthSpec::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        frames: 3,
        regions: 2,
        clusters: 3,
        hidden: 8,
        embed: 6,
        attention: 5,
        batch_size: 2,
        learning_rate: 1e-3,
        max_steps: 4,
        ..TrainConfig::default()
    }
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    ckpt: Checkpoint,
    train: Corpus,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = synthesize_dataset(&root, &small_spec()).unwrap();
    let dataset = load_manifest(&corpus.manifest_path).unwrap();
    let ids: Vec<String> = dataset.entries().iter().map(|e| e.video_id.clone()).collect();
    let config = small_config();
    let vocab = build_vocabulary(&corpus.records, config.min_count).unwrap();
    let train = Corpus::from_dataset(&dataset, &ids, &corpus.records, &vocab, config.max_sentence_len).unwrap();
    let shape = FeatureShape::of(&train.videos[0]).unwrap();
    let ckpt = Checkpoint::initialize(config, vocab, shape).unwrap();
    Fixture {
        _dir: dir,
        root,
        ckpt,
        train,
    }
}

fn run_fit(ckpt: &mut Checkpoint, train: &Corpus, steps: u64) {
    let options = FitOptions {
        max_steps: steps,
        ..FitOptions::default()
    };
    fit(ckpt, train, None, &options, &mut std::io::sink(), &mut |_| Ok(())).unwrap();
}

#[test]
fn checkpoint_bytes_survive_save_and_load() {
    let mut f = fixture();
    run_fit(&mut f.ckpt, &f.train, 2);
    let path = f.root.join("a.ckpt");
    f.ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, f.ckpt);
    assert_eq!(loaded.to_bytes(), fs::read(&path).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let f = fixture();
    let bytes = f.ckpt.to_bytes();
    let origin = Path::new("x.ckpt");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..6], origin).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, origin).is_err());
}

#[test]
fn resumed_training_matches_continuous_training() {
    let f = fixture();
    let mut continuous = f.ckpt.clone();
    run_fit(&mut continuous, &f.train, 4);

    let mut first = f.ckpt.clone();
    run_fit(&mut first, &f.train, 2);
    let path = f.root.join("half.ckpt");
    first.save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap();
    run_fit(&mut resumed, &f.train, 4);

    assert_eq!(resumed.step, 4);
    assert_eq!(resumed.to_bytes(), continuous.to_bytes());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut f = fixture();
    f.ckpt.config.learning_rate = 0.0;
    let before = f.ckpt.model.clone();
    run_fit(&mut f.ckpt, &f.train, 3);
    assert_eq!(f.ckpt.model, before);
}

#[test]
fn captioning_is_deterministic_and_handles_one_frame() {
    let f = fixture();
    let video = &f.train.videos[0];
    let a = caption_video(&f.ckpt, video, 3, FusionMode::Mean).unwrap();
    let b = caption_video(&f.ckpt, video, 3, FusionMode::Mean).unwrap();
    assert_eq!(a, b);

    let mut single = video.clone();
    single.frames.truncate(1);
    let cap = caption_video(&f.ckpt, &single, 3, FusionMode::Geometric).unwrap();
    assert!(cap.tokens.len() <= f.ckpt.config.max_decode_steps());
    assert!(cap.score.is_finite());
}

#[test]
fn mismatched_features_are_rejected() {
    let f = fixture();
    let dims = VideoDims {
        frames: 3,
        regions: 2,
        height: 2,
        width: 2,
        channels: 5,
        appearance: 4,
    };
    let other = random_video("odd", dims, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(f.ckpt.check_features(&other).is_err());
}

#[test]
fn truncated_feature_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let corpus = synthesize_dataset(dir.path(), &small_spec()).unwrap();
    let dataset = load_manifest(&corpus.manifest_path).unwrap();
    let entry = dataset.entries()[0].clone();
    let base = corpus.manifest_path.parent().unwrap();
    let target = base.join(&entry.frame_features);
    let bytes = fs::read(&target).unwrap();
    fs::write(&target, &bytes[..bytes.len() - 4]).unwrap();
    let err = load_manifest(&corpus.manifest_path)
        .and_then(|d| d.load_by_id(&entry.video_id))
        .unwrap_err();
    assert!(matches!(err, Error::Data { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn aggregation_input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = VladModel::random(3, 2, 3, AssignmentMode::Softmax, &mut rng);
    let maps: Vec<FeatureMap> = (0..3)
        .map(|_| {
            let v = oabtg::tensor::Tensor::uniform(&[2 * 2 * 3], 1.0, &mut rng).data;
            FeatureMap::new(2, 2, 3, v).unwrap()
        })
        .collect();
    let weights: Vec<Vec<f64>> = (0..3)
        .map(|_| oabtg::tensor::Tensor::uniform(&[6], 1.0, &mut rng).data)
        .collect();
    let objective = |maps: &[FeatureMap]| -> f64 {
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let out = model.encode(&refs).unwrap();
        out.iter()
            .zip(&weights)
            .map(|(o, w)| o.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let refs: Vec<&FeatureMap> = maps.iter().collect();
    let (_, tape) = model.encode_with_tape(&refs).unwrap();
    let mut grads = model.zeros_like();
    let mut grad_inputs: Vec<Vec<f64>> = maps.iter().map(|m| vec![0.0; m.values.len()]).collect();
    model.backward(&refs, &tape, &weights, &mut grads, Some(&mut grad_inputs));

    let eps = 1e-6;
    for t in 0..maps.len() {
        for i in 0..maps[t].values.len() {
            let mut plus = maps.clone();
            plus[t].values[i] += eps;
            let mut minus = maps.clone();
            minus[t].values[i] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let analytic = grad_inputs[t][i];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "t={t} i={i}: {analytic} vs {numeric}"
            );
        }
    }
}

fn oabtg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oabtg"))
        .args(args)
        .env_remove("OABTG_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn cli_help_lists_hyperparameters_with_defaults() {
    let out = oabtg(&["train", "--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for flag in [
        "--learning-rate",
        "--batch-size",
        "--dropout",
        "--grad-clip",
        "--max-sentence-len",
        "--frames",
        "--regions",
        "--clusters",
        "--hidden",
        "--embed",
        "--attention",
        "--beam",
        "--seed",
        "--fusion",
        "--direction",
        "--config",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: 1e-4]"));
    assert!(text.contains("[default: 42]"));
}

#[test]
fn cli_exit_codes_follow_error_kinds() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let synth = oabtg(&["synth", "--out", d.to_str().unwrap(), "--videos", "2", "--frames", "3", "--channels", "4", "--appearance", "4"]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let manifest = d.join("manifest.json");
    let captions = d.join("captions.jsonl");
    let ckpt = d.join("m.ckpt");
    let base = [
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--captions",
        captions.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ];

    let bad_lr = oabtg(&[&base[..], &["--learning-rate", "-1"]].concat());
    assert_eq!(bad_lr.status.code(), Some(2));

    let missing = oabtg(&["caption", "--checkpoint", "/nonexistent.ckpt", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));

    let wrong_dims = oabtg(&[&base[..], &["--frames", "7", "--regions", "2"]].concat());
    assert_eq!(wrong_dims.status.code(), Some(3));

    let small = [
        "--frames", "3", "--regions", "2", "--clusters", "2", "--hidden", "6", "--embed", "4", "--attention", "4",
        "--max-steps", "2",
    ];
    let ok = oabtg(&[&base[..], &small[..]].concat());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(ckpt.exists());

    let empty = d.join("empty.txt");
    fs::write(&empty, "").unwrap();
    let none = oabtg(&[
        "caption",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(none.status.code(), Some(0));
    assert!(stdout(&none).trim().is_empty());

    let trace = oabtg(&["trace-graph", "--manifest", manifest.to_str().unwrap()]);
    assert!(trace.status.success());
    assert_eq!(stdout(&trace).lines().count(), 2);
}

#[test]
fn cli_runs_with_the_same_seed_are_identical() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert!(oabtg(&["synth", "--out", d.to_str().unwrap(), "--videos", "2", "--frames", "3"]).status.success());
    let manifest = d.join("manifest.json");
    let captions = d.join("captions.jsonl");
    let mut produced = Vec::new();
    for name in ["a", "b"] {
        let ckpt = d.join(format!("{name}.ckpt"));
        let out = oabtg(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--captions",
            captions.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--config",
            d.join("config.json").to_str().unwrap(),
            "--max-steps",
            "3",
            "--log",
            d.join(format!("{name}.log")).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let caps = oabtg(&["caption", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
        assert!(caps.status.success());
        produced.push((fs::read(&ckpt).unwrap(), stdout(&caps)));
    }
    assert_eq!(produced[0], produced[1]);
}
