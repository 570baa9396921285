use std::path::Path;

use cgans_cli::data::{read_dataset, write_dataset};
use cgans_cli::ppm::{decode_value, encode_value, read_ppm, write_ppm};
use cgans_cli::{parse_targets, resolve_train_config, run_with_env};
use cgans_core::datagen::make_dataset;
use cgans_core::trainer::{save_checkpoint, ModelBundle, TrainConfig};

struct Outcome {
    code: i32,
    out: String,
    log: String,
}

fn cgans(args: &[&str], env_seed: Option<&str>) -> Outcome {
    let (mut out, mut log) = (Vec::new(), Vec::new());
    let argv = std::iter::once("cgans").chain(args.iter().copied());
    let code = run_with_env(argv, env_seed, &mut out, &mut log);
    Outcome {
        code,
        out: String::from_utf8(out).unwrap(),
        log: String::from_utf8(log).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(size: usize) -> TrainConfig {
    TrainConfig {
        image_size: size,
        g_base_channels: 8,
        g_body_blocks: 1,
        d_base_channels: 8,
        d_stack_layers: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn generate_writes_one_image_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.cgan");
    save_checkpoint(&ModelBundle::new(&tiny_config(16)).unwrap(), &ckpt).unwrap();
    let ds = make_dataset(1, 7, 16, 5).unwrap();
    let input = dir.path().join("face.ppm");
    write_ppm(&input, &ds.sequences[0][2].image).unwrap();
    let out = dir.path().join("aged");

    let r = cgans(
        &["generate", "--checkpoint", p(&ckpt), "--input", p(&input), "--out", p(&out)],
        None,
    );
    assert_eq!(r.code, 0, "{}", r.log);
    assert!(r.log.starts_with("cgans "), "{}", r.log);
    for k in 0..7 {
        let img = read_ppm(&out.join(format!("face_g{k}.ppm"))).unwrap();
        assert_eq!(img.dims(), &[3, 16, 16]);
    }
    assert_eq!(r.out.lines().count(), 7);

    let r = cgans(
        &["generate", "--checkpoint", p(&ckpt), "--input", p(&input), "--targets", "1,5", "--out", p(&out)],
        None,
    );
    assert_eq!(r.code, 0, "{}", r.log);
    assert_eq!(r.out.lines().count(), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, &make_dataset(2, 7, 16, 1).unwrap()).unwrap();
    let r = cgans(
        &["train", "--data", p(&data), "--out", p(&dir.path().join("run")), "--set", "learning_rate=0.1"],
        None,
    );
    assert_eq!(r.code, 1);
    assert!(r.log.contains("learning_rate"), "{}", r.log);
    assert!(!dir.path().join("run").exists());

    let cfg_file = dir.path().join("train.cfg");
    std::fs::write(&cfg_file, "epochs = 1\nwarmup = 3\n").unwrap();
    let r = cgans(
        &["train", "--data", p(&data), "--out", p(&dir.path().join("run")), "--config", p(&cfg_file)],
        None,
    );
    assert_eq!(r.code, 1);
    assert!(r.log.contains("warmup"), "{}", r.log);
}

#[test]
fn later_config_sources_override_earlier_ones() {
    let flags = |kv: &[(&str, &str)]| -> Vec<(String, String)> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    };
    let (cfg, sized) = resolve_train_config(None, &[], Some("9")).unwrap();
    assert_eq!(cfg.seed, 9);
    assert!(!sized);
    let (cfg, _) = resolve_train_config(Some("seed = 4\nepochs = 2\n"), &[], Some("9")).unwrap();
    assert_eq!((cfg.seed, cfg.epochs), (4, 2));
    let (cfg, sized) = resolve_train_config(
        Some("seed = 4\nepochs = 2\n"),
        &flags(&[("seed", "6"), ("image_size", "16")]),
        Some("9"),
    )
    .unwrap();
    assert_eq!((cfg.seed, cfg.epochs, cfg.image_size), (6, 2, 16));
    assert!(sized);
    assert!(resolve_train_config(None, &[], Some("nine")).is_err());
}

#[test]
fn train_then_eval_through_the_binary_interface() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let r = cgans(&["make-data", "--out", p(&data), "--identities", "3", "--size", "16"], Some("2"));
    assert_eq!(r.code, 0, "{}", r.log);
    assert!(r.log.starts_with("cgans ") && r.log.contains("seed=2"), "{}", r.log);

    let r = cgans(
        &[
            "train", "--data", p(&data), "--out", p(&run), "--epochs", "1",
            "--set", "g_base_channels=8", "--set", "g_body_blocks=1",
            "--set", "d_base_channels=8", "--set", "d_stack_layers=3",
        ],
        None,
    );
    assert_eq!(r.code, 0, "{}", r.log);
    // The header precedes the first progress line and names the inferred size.
    let first = r.log.lines().next().unwrap();
    assert!(first.starts_with("cgans ") && first.contains("image_size=16"), "{first}");
    for f in ["final.cgan", "metrics.csv", "train.log"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let report = dir.path().join("report");
    let r = cgans(
        &[
            "eval", "--checkpoint", p(&run.join("final.cgan")), "--data", p(&data),
            "--out", p(&report), "--max-per-cell", "2", "--verification-pairs", "5",
        ],
        None,
    );
    assert_eq!(r.code, 0, "{}", r.log);
    assert_eq!(std::fs::read_to_string(report.join("aging_report.csv")).unwrap().lines().count(), 50);
    assert!(report.join("far_frr_aged.csv").exists());
    assert!(r.out.contains("EER original"), "{}", r.out);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cgans(&["--help"], None).code, 0);
    assert_eq!(cgans(&["frobnicate"], None).code, 1);
    assert_eq!(cgans(&["gradcheck", "--seed", "x"], None).code, 1);

    let missing = dir.path().join("missing.cgan");
    let r = cgans(&["eval", "--checkpoint", p(&missing), "--data", "d", "--out", "o"], None);
    assert_eq!(r.code, 2);
    assert!(r.log.contains("missing.cgan"), "{}", r.log);

    let junk = dir.path().join("junk.cgan");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let r = cgans(
        &["generate", "--checkpoint", p(&junk), "--input", "x.ppm", "--out", p(dir.path())],
        None,
    );
    assert_eq!(r.code, 2, "{}", r.log);

    let r = cgans(
        &["generate", "--checkpoint", p(&junk), "--input", "x.ppm", "--targets", "7", "--out", "o"],
        None,
    );
    assert_eq!(r.code, 1);
}

#[test]
fn dataset_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(3, 7, 16, 8).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.size, ds.size);
    assert_eq!(back.sequences.len(), ds.sequences.len());
    assert_eq!(back.pairs.len(), ds.pairs.len());
    assert_eq!(back.singles.len(), ds.singles.len());
    assert_eq!(back.manifest(), ds.manifest());
    let originals = ds.sequences.iter().flatten().chain(&ds.singles);
    let loaded = back.sequences.iter().flatten().chain(&back.singles);
    for (a, b) in originals.zip(loaded) {
        for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
            assert_eq!(y, decode_value(encode_value(x)));
        }
    }

    // Writing the loaded dataset again reproduces every byte.
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &back).unwrap();
    for rec in back.manifest() {
        assert_eq!(
            std::fs::read(dir.path().join(&rec.path)).unwrap(),
            std::fs::read(again.path().join(&rec.path)).unwrap()
        );
    }
}

#[test]
fn target_lists_parse() {
    assert_eq!(parse_targets("all").unwrap().len(), 7);
    let t = parse_targets("0, 3,6").unwrap();
    assert_eq!(t.iter().map(|g| g.index()).collect::<Vec<_>>(), vec![0, 3, 6]);
    assert!(parse_targets("2,9").is_err());
    assert!(parse_targets("").is_err());
}
