//! Configuration, checkpoints, metric logs, exports and the binary's exit
//! codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use tadformer::cli::{self, Checkpoint, RunConfig, CSV_HEADER};
use tadformer::mtl::{eval_sample, Batch, SynthSpec};
use tadformer::{Error, Tadformer, Tape, Tensor, TuningMode};

fn toy_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

fn toy(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&toy_path()).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tadformer"));
    c.env_remove(cli::THREADS_ENV);
    c
}

fn train(cfg: &RunConfig) -> String {
    let mut out = Vec::new();
    cli::cmd_train(cfg, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

// ------------------------------------------------------------------ config

#[test]
fn config_round_trip_is_canonical() {
    for path in [toy_path(), Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")] {
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = RunConfig::from_json(&text).unwrap();
        let canon = cfg.to_canonical_json();
        let again = RunConfig::from_json(&canon).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(canon, again.to_canonical_json());
    }
    let default = RunConfig::from_json(
        &std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(default, RunConfig { out_dir: "out/default".into(), ..RunConfig::default() });
}

#[test]
fn config_errors_name_the_key() {
    let cases = [
        (r#"{"rnak": 4}"#, "rnak"),
        (r#"{"backbone": {"embed_dim": "wide"}}"#, "backbone.embed_dim"),
        (r#"{"backbone": {"embed_dim": 10, "heads": [4, 4]}}"#, "heads"),
        (r#"{"mode": "everything"}"#, "mode"),
        (r#"{"rank": 0}"#, "rank"),
        (r#"{"kernel_size": 4}"#, "kernel_size"),
        (r#"{"tasks": []}"#, "tasks"),
        (r#"{"tasks": [{"kind": "class-seg", "classes": 1}]}"#, "tasks[0].classes"),
        (r#"{"lr": -1.0}"#, "lr"),
        (r#"{"beta2": 1.0}"#, "beta2"),
    ];
    for (text, key) in cases {
        match RunConfig::from_json(text) {
            Err(Error::Config(msg)) => assert!(msg.contains(key), "`{text}` gave `{msg}`"),
            other => panic!("`{text}` gave {other:?}"),
        }
    }
}

// -------------------------------------------------------------- checkpoint

#[test]
fn checkpoint_small_round_trips() {
    let empty = Checkpoint { tensors: vec![] };
    assert_eq!(empty.to_bytes().unwrap().len(), 12);
    assert!(Checkpoint::from_bytes(&empty.to_bytes().unwrap()).unwrap().tensors.is_empty());
    let one = Checkpoint { tensors: vec![("w".into(), Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e38]).unwrap())] };
    let back = Checkpoint::from_bytes(&one.to_bytes().unwrap()).unwrap();
    assert_eq!(back.tensors[0].0, "w");
    assert!(back.tensors[0].1.bitwise_eq(&one.tensors[0].1));
    let nan = Checkpoint { tensors: vec![("w".into(), Tensor::new(&[1], vec![f32::NAN]).unwrap())] };
    assert!(matches!(nan.to_bytes(), Err(Error::Numerical(_))));
}

#[test]
fn checkpoint_layout_is_little_endian() {
    let c = Checkpoint { tensors: vec![("ab".into(), Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap())] };
    let mut want = b"TADF".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(b"ab");
    want.extend(2u32.to_le_bytes());
    want.extend(1u64.to_le_bytes());
    want.extend(2u64.to_le_bytes());
    want.extend(1f32.to_le_bytes());
    want.extend((-2f32).to_le_bytes());
    assert_eq!(c.to_bytes().unwrap(), want);
}

#[test]
fn full_model_checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path());
    let (_, store) = Tadformer::new::<f32>(cfg.model_config(), 9).unwrap();
    let path = dir.path().join("m.tadf");
    Checkpoint::from_store(&store).write(&path).unwrap();
    let (_, mut other) = Tadformer::new::<f32>(cfg.model_config(), 10).unwrap();
    Checkpoint::read(&path).unwrap().load_into(&mut other).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.bitwise_eq(&b.tensor));
    }
}

#[test]
fn checkpoint_read_errors() {
    let c = Checkpoint { tensors: vec![("w".into(), Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())] };
    let bytes = c.to_bytes().unwrap();
    for cut in [2, 6, 13, 20, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset as usize <= cut, "cut {cut}: offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut future = bytes.clone();
    future[4] = 2;
    assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::Version { found: 2, supported: 1 })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Corrupt { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"PNG\x00\x01"), Err(Error::Corrupt { offset: 0, .. })));
}

#[test]
fn incompatible_checkpoint_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path());
    let (_, store) = Tadformer::new::<f32>(cfg.model_config(), 0).unwrap();
    let mut wider = cfg.clone();
    wider.rank = 2;
    let (_, mut other) = Tadformer::new::<f32>(wider.model_config(), 0).unwrap();
    match Checkpoint::from_store(&store).load_into(&mut other) {
        Err(Error::Mismatch { name, .. }) => assert_eq!(name, "peft/s0/b0/ts/qkv/down"),
        other => panic!("{other:?}"),
    }
    let mut short = Checkpoint::from_store(&store);
    let last = short.tensors.pop().unwrap().0;
    let mut target = store.clone();
    match short.load_into(&mut target) {
        Err(Error::Mismatch { name, reason }) => {
            assert_eq!(name, last);
            assert!(reason.contains("missing"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn golden_checkpoint_is_byte_stable() {
    // the untrained toy model at seed 0, as written by `train` with zero steps
    let golden = include_bytes!("data/toy_seed0.tadf");
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path());
    cfg.steps = 0;
    train(&cfg);
    let bytes = std::fs::read(dir.path().join("checkpoint.tadf")).unwrap();
    assert_eq!(bytes.len(), golden.len());
    assert!(bytes == golden.as_slice());
}

// ----------------------------------------------------------------- metrics

#[test]
fn metrics_csv_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (toy(a.path()), toy(b.path()));
    let (ra, rb) = (train(&ca), train(&cb));
    let csv_a = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(b.path().join("metrics.csv")).unwrap();
    assert!(csv_a == csv_b);
    let text = String::from_utf8(csv_a).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + ca.steps * ca.tasks.len());
    assert_eq!(lines[1].split(',').count(), 6);
    assert!(lines[1].starts_with("1,0,"));
    assert!(lines[1].ends_with(",0"));
    assert_eq!(
        ra.replace(&a.path().display().to_string(), ""),
        rb.replace(&b.path().display().to_string(), "")
    );
    assert!(std::fs::read(a.path().join("checkpoint.tadf")).unwrap() == std::fs::read(b.path().join("checkpoint.tadf")).unwrap());
}

#[test]
fn zero_steps_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path());
    cfg.steps = 0;
    let report = train(&cfg);
    assert!(report.contains("final weighted loss"));
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), format!("{CSV_HEADER}\n"));
    let (_, init) = Tadformer::new::<f32>(cfg.model_config(), cfg.seed).unwrap();
    let ck = Checkpoint::read(&dir.path().join("checkpoint.tadf")).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), Checkpoint::from_store(&init).to_bytes().unwrap());
    let written = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(written, cfg);
}

#[test]
fn eval_reproduces_train_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path());
    let report = train(&cfg);
    let mut out = Vec::new();
    cli::cmd_eval(&cfg, &dir.path().join("checkpoint.tadf"), false, &mut out).unwrap();
    let eval = String::from_utf8(out).unwrap();
    for line in eval.lines() {
        assert!(report.contains(line), "`{line}` not in train report");
    }
}

// ------------------------------------------------------------ count-params

#[test]
fn parameter_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path());
    let counts = cli::param_table(&cfg).unwrap();
    assert_eq!(counts.len(), TuningMode::ALL.len());
    let by = |m: TuningMode| counts.iter().find(|c| c.mode == m).unwrap();
    let full = by(TuningMode::Tadformer);
    assert!(full.total < by(TuningMode::FullFinetune).total);
    let dec = by(TuningMode::DecodersOnly);
    assert_eq!(dec.total, dec.group(tadformer::ParamGroup::Head));
    let (r, k) = (cfg.rank, cfg.kernel_size);
    assert_eq!(full.group(tadformer::ParamGroup::Dtf), 3 * cfg.backbone.depths.len() * (r * r * k * k + r));

    let csv = cli::render_param_csv(&counts);
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "mode");
    assert_eq!(*rows[0].last().unwrap(), "total");
    assert_eq!(rows.len(), 1 + TuningMode::ALL.len());
    for row in &rows[1..] {
        let m: TuningMode = row[0].parse().unwrap();
        let cells: Vec<usize> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(*cells.last().unwrap(), by(m).total);
        assert_eq!(cells[..cells.len() - 1].iter().sum::<usize>(), by(m).total);
    }
    let table = cli::render_param_table(&counts);
    let widths: Vec<usize> = table.lines().map(str::len).collect();
    assert!(widths.windows(2).all(|w| w[0] == w[1]));
}

// -------------------------------------------------------------- export-tam

#[test]
fn exported_maps_match_an_independent_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path());
    cfg.steps = 3;
    train(&cfg);
    let mut out = Vec::new();
    cli::cmd_export_tam(&cfg, &dir.path().join("checkpoint.tadf"), 1, &mut out).unwrap();
    let listed: Vec<String> = String::from_utf8(out).unwrap().lines().map(String::from).collect();
    let (t, s) = (cfg.tasks.len(), cfg.backbone.depths.len());
    assert_eq!(listed.len(), t * s);

    let (model, mut store) = Tadformer::new::<f32>(cfg.model_config(), cfg.seed).unwrap();
    Checkpoint::read(&dir.path().join("checkpoint.tadf")).unwrap().load_into(&mut store).unwrap();
    let sample = eval_sample(cfg.seed, 1, &SynthSpec::new(&cfg.backbone, &cfg.tasks));
    let batch = Batch::collate(std::slice::from_ref(&sample));
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, &vec![false; store.len()]);
    let img = tape.constant(batch.images);
    let fwd = model.forward(&mut tape, &vars, img, cfg.mode).unwrap();
    for (stage, trace) in fwd.stages.iter().enumerate() {
        let a = tape.value(trace.attn);
        let (heads, l) = (a.shape()[1], a.shape()[2]);
        let n = trace.grid.0 * trace.grid.1;
        assert_eq!(l, t + n);
        for task in 0..t {
            let avg: Vec<f64> = (0..n)
                .map(|j| (0..heads).map(|h| a.data()[(h * l + task) * l + t + j] as f64).sum::<f64>() / heads as f64)
                .collect();
            let lo = avg.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = avg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pixels: Vec<u8> = avg.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect();
            let mut want = format!("P5\n{} {}\n255\n", trace.grid.1, trace.grid.0).into_bytes();
            want.extend(pixels);
            let path = dir.path().join(format!("tam_stage{stage}_task{task}.pgm"));
            assert!(listed.contains(&path.display().to_string()));
            assert_eq!(std::fs::read(&path).unwrap(), want, "{}", path.display());
        }
    }
}

#[test]
fn constant_map_is_mid_grey() {
    let dir = tempfile::tempdir().unwrap();
    let stages = [cli::StageTam { stage: 0, grid: (2, 3), maps: vec![vec![0.25; 6]] }];
    let paths = cli::export_tam(&stages, dir.path()).unwrap();
    let bytes = std::fs::read(&paths[0]).unwrap();
    assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
    assert_eq!(&bytes[11..], &[128u8; 6]);
}

#[test]
fn modes_without_prompts_cannot_export() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path());
    cfg.mode = TuningMode::DtfOnly;
    cfg.steps = 0;
    train(&cfg);
    let mut out = Vec::new();
    let err = cli::cmd_export_tam(&cfg, &dir.path().join("checkpoint.tadf"), 0, &mut out).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

// -------------------------------------------------------------- grad-check

#[test]
fn grad_check_is_deterministic_and_refuses_large_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path());
    let a = cli::grad_check(&cfg, None).unwrap();
    let b = cli::grad_check(&cfg, None).unwrap();
    assert_eq!(a, b);
    assert!(a.passed());
    let big = RunConfig::default();
    match cli::grad_check(&big, None) {
        Err(Error::Config(msg)) => assert!(msg.contains("backbone")),
        other => panic!("{other:?}"),
    }
}

// ------------------------------------------------------------------ binary

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| bin().args(args).output().unwrap();

    let ok = run(&["count-params", "--config", toy_path().to_str().unwrap(), "--csv"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("mode,"));

    let missing = run(&["count-params", "--config", d.join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));

    let bad = write_config(d, r#"{"rnak": 4}"#);
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rnak"));

    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let threads = bin()
        .env(cli::THREADS_ENV, "many")
        .args(["train", "--config", toy_path().to_str().unwrap(), "--out", d.join("t").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));

    let junk = d.join("junk.tadf");
    std::fs::write(&junk, b"TADF\x01\x00\x00\x00\x05").unwrap();
    let eval = run(&["eval", "--config", toy_path().to_str().unwrap(), "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&eval.stderr).contains("byte"));

    let corrupt = run(&["grad-check", "--config", toy_path().to_str().unwrap(), "--corrupt-group", "dtf"]);
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("dtf"));

    let big = write_config(d, "{}");
    let refused = run(&["grad-check", "--config", big.to_str().unwrap()]);
    assert_eq!(refused.status.code(), Some(1));
}

#[test]
fn seed_and_out_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .env(cli::THREADS_ENV, "1")
        .args(["train", "--config", toy_path().to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let written = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(written.seed, 4);
    assert_eq!(written.out_dir, out);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",4")));
}
