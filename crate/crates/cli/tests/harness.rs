//! Harness-level integration tests: determinism, checkpoint round trips,
//! CLI behavior and the export formats. Everything runs on a tiny synthetic
//! dataset at 16x16 so the whole file stays fast.

use fewshot_cli::config::Config;
use fewshot_cli::{checkpoint, evaluator, run_train, trainer};
use fewshot_core::episodes::Split;
use fewshot_core::synth::{self, SynthSpec};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

fn tiny_dataset() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join("fewshot-harness-data");
        let spec = SynthSpec {
            train_classes: 8,
            val_classes: 2,
            test_classes: 4,
            images_per_class: 8,
            image_size: 16,
            seed: 3,
            ..Default::default()
        };
        let _ = std::fs::remove_dir_all(&dir);
        synth::write_dataset(&spec, &dir).unwrap();
        dir
    })
}

fn tiny_config(extra: &[(&str, &str)]) -> Config {
    let mut overrides: Vec<(String, String)> = vec![
        ("dataset.root".into(), tiny_dataset().display().to_string()),
        ("dataset.image_size".into(), "16".into()),
        ("episode.ways".into(), "2".into()),
        ("episode.queries".into(), "2".into()),
        ("eval.queries".into(), "2".into()),
        ("train.iterations".into(), "3".into()),
        ("train.eval_interval".into(), "2".into()),
        ("train.eval_episodes".into(), "4".into()),
        ("eval.episodes".into(), "8".into()),
    ];
    for (k, v) in extra {
        overrides.push((k.to_string(), v.to_string()));
    }
    Config::from_sources(None, &overrides, Some(11)).unwrap()
}

fn fresh_out(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fewshot-harness-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn identical_seeds_produce_identical_metrics() {
    let cfg = tiny_config(&[]);
    let a = fresh_out("det-a");
    let b = fresh_out("det-b");
    run_train(&cfg, &a, None).unwrap();
    run_train(&cfg, &b, None).unwrap();
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb, "metrics CSVs must be byte-identical for equal seeds");
    let header = String::from_utf8(ma.clone()).unwrap();
    assert!(header.starts_with(trainer::METRICS_HEADER));
    // 3 iterations -> header + 3 rows
    assert_eq!(header.lines().count(), 4);
}

#[test]
fn different_seed_changes_training() {
    let a = fresh_out("seed-a");
    let b = fresh_out("seed-b");
    run_train(&tiny_config(&[]), &a, None).unwrap();
    let mut cfg2 = tiny_config(&[]);
    cfg2 = cfg2.with_overrides(&[("seed".into(), "12".into())]).unwrap();
    run_train(&cfg2, &b, None).unwrap();
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.join("metrics.csv")).unwrap();
    assert_ne!(ma, mb);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact_and_resume_matches_straight_run() {
    // straight run of 4 iterations
    let cfg4 = tiny_config(&[("train.iterations", "4")]);
    let d4 = fresh_out("resume-direct");
    let direct = run_train(&cfg4, &d4, None).unwrap();

    // 3 iterations, then resume for the 4th
    let cfg3 = tiny_config(&[("train.iterations", "3")]);
    let d3 = fresh_out("resume-part1");
    let part = run_train(&cfg3, &d3, None).unwrap();
    let d3b = fresh_out("resume-part2");
    let resumed = run_train(&cfg4, &d3b, Some(&part.checkpoint)).unwrap();

    let a = checkpoint::load(&direct.checkpoint).unwrap();
    let b = checkpoint::load(&resumed.checkpoint).unwrap();
    assert_eq!(a.iteration, b.iteration);
    assert_eq!(a.adam_step, b.adam_step);
    assert_eq!(a.rng_seed, b.rng_seed);
    assert_eq!(a.rng_word_pos, b.rng_word_pos);
    assert_eq!(a.tensors.len(), b.tensors.len());
    for ((na, sa, da), (nb, sb, db)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(na, nb);
        assert_eq!(sa, sb);
        let bits_a: Vec<u64> = da.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = db.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor {na} differs after resume");
    }

    // plain save -> load round trip preserves bits
    let reloaded = checkpoint::load(&direct.checkpoint).unwrap();
    for ((_, _, da), (_, _, db)) in a.tensors.iter().zip(&reloaded.tensors) {
        assert_eq!(
            da.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            db.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn resume_with_different_config_is_rejected() {
    let cfg = tiny_config(&[]);
    let d = fresh_out("resume-reject");
    let art = run_train(&cfg, &d, None).unwrap();
    let other = tiny_config(&[("train.lr", "0.01")]);
    let err = run_train(&other, &fresh_out("resume-reject2"), Some(&art.checkpoint));
    assert!(matches!(err, Err(fewshot_core::Error::Config(_))));
}

#[test]
fn eval_is_deterministic_and_ci_shrinks_with_episodes() {
    let cfg = tiny_config(&[]);
    let d = fresh_out("evaldet");
    let art = run_train(&cfg, &d, None).unwrap();
    let data = checkpoint::load(&art.checkpoint).unwrap();
    let (ckpt_cfg, model, _) = trainer::load_model::<f64>(&data).unwrap();
    let ds = fewshot_cli::load_split(&ckpt_cfg, Split::Test).unwrap();

    let r1 = evaluator::evaluate(&model, &ds, &ckpt_cfg, 5, 50).unwrap();
    let r2 = evaluator::evaluate(&model, &ds, &ckpt_cfg, 5, 50).unwrap();
    assert_eq!(r1.mean_acc, r2.mean_acc);
    assert_eq!(r1.ci95, r2.ci95);
    assert!(r1.mean_acc >= 0.0 && r1.mean_acc <= 1.0);
    assert!(r1.ci95 >= 0.0);

    // CI half-width scales like 1/sqrt(episodes): 100 vs 400 within 20% of 2x
    let r100 = evaluator::evaluate(&model, &ds, &ckpt_cfg, 7, 100).unwrap();
    let r400 = evaluator::evaluate(&model, &ds, &ckpt_cfg, 7, 400).unwrap();
    let ratio = r100.ci95 / r400.ci95;
    assert!(
        (ratio - 2.0).abs() < 0.4,
        "CI ratio {ratio} should be near 2 (1/sqrt scaling)"
    );
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fewshot"))
}

#[test]
fn cli_exit_codes() {
    // unknown config key -> 2
    let out = bin()
        .args(["--set", "no.such.key=1", "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // missing dataset -> 3
    let out = bin()
        .args([
            "--set",
            "dataset.root=/definitely/not/here",
            "--out-dir",
            fresh_out("cli-miss").to_str().unwrap(),
            "train",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // bad checkpoint path -> 3
    let out = bin()
        .args(["eval", "--checkpoint", "/definitely/not/here.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_train_eval_and_feature_dump() {
    let out_dir = fresh_out("cli-train");
    let status = bin()
        .args([
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            "3",
            "--set",
            &format!("dataset.root={}", tiny_dataset().display()),
            "--set",
            "dataset.image_size=16",
            "--set",
            "episode.ways=2",
            "--set",
            "episode.queries=2",
            "--set",
            "eval.queries=2",
            "--set",
            "train.iterations=2",
            "--set",
            "train.eval_interval=0",
            "train",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = out_dir.join("checkpoint.ckpt");
    assert!(ckpt.exists());

    let out = bin()
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "test",
            "--episodes",
            "5",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("accuracy"), "eval should print a report: {text}");

    // dump-features: 3 images -> 3-row grid + csv matching raw values
    let imgs: Vec<String> = (0..3)
        .map(|i| {
            tiny_dataset()
                .join("glyph_0000")
                .join(format!("00{i}.png"))
                .display()
                .to_string()
        })
        .collect();
    let feat_dir = fresh_out("cli-feats");
    let out = bin()
        .args([
            "--out-dir",
            feat_dir.to_str().unwrap(),
            "dump-features",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            &imgs[0],
            &imgs[1],
            &imgs[2],
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(feat_dir.join("features.png").exists());
    let csv = std::fs::read_to_string(feat_dir.join("features.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    // header + 3 images x 16 channels x 4x4 positions
    assert_eq!(rows.len(), 1 + 3 * 16 * 16);
    verify_csv_against_model(&ckpt, &imgs, &csv);

    // mi-probe runs on any checkpoint (all stream heads are persisted)
    let out = bin()
        .args([
            "mi-probe",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "test",
            "--episodes",
            "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mse: f64 = text
        .trim()
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .expect("probe prints a number");
    assert!((0.0..=1.0).contains(&mse));
}

fn verify_csv_against_model(ckpt: &Path, imgs: &[String], csv: &str) {
    use fewshot_core::Graph;
    let data = checkpoint::load(ckpt).unwrap();
    let (cfg, model, _) = trainer::load_model::<f64>(&data).unwrap();
    // recompute the embedding of the first image and compare a few cells
    let img = fewshot_core::episodes::load_single_image(
        Path::new(&imgs[0]),
        cfg.image_size,
        cfg.channels,
    )
    .unwrap();
    let plane = cfg.image_size * cfg.image_size;
    let mut values = vec![0.0f64; plane];
    for p in 0..plane {
        values[p] = (img.pixels[p] as f64 / 255.0 - cfg.norm.mean[0]) / cfg.norm.std[0];
    }
    let mut g: Graph<f64> = Graph::new();
    let t = g.constant(fewshot_core::Tensor::from_vec(
        &[1, 1, cfg.image_size, cfg.image_size],
        values,
    ));
    let feats = model.embed.embed(&mut g, t, false).unwrap();
    let fd = g.value(feats).data();
    let fw = cfg.image_size / 4;
    for line in csv.lines().skip(1).take(40) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells[0] != "0" {
            break;
        }
        let (ch, y, x): (usize, usize, usize) =
            (cells[1].parse().unwrap(), cells[2].parse().unwrap(), cells[3].parse().unwrap());
        let want = fd[(ch * fw + y) * fw + x];
        let got: f64 = cells[4].parse().unwrap();
        assert!(
            (got - want).abs() <= 1e-6 * want.abs().max(1.0),
            "csv value {got} vs tensor {want}"
        );
    }
}
