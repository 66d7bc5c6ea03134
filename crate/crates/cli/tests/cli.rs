use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vagnet_core::dataio::{
    save_weights, synth_basis, write_features, FeatureSequence, SyntheticSpec,
};
use vagnet_core::model::{ModelConfig, ModelParams};
use vagnet_core::numerics::Tensor;

fn vagnet(args: &[&str]) -> Output {
    vagnet_env(args, &[])
}

fn vagnet_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vagnet"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", p(dir), "--n-clips", "8", "--dim", "8", "--frames", "20"];
    args.extend_from_slice(extra);
    let o = vagnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.toml")
}

const SMALL_MODEL: [&str; 10] = ["--d-model", "8", "--heads", "2", "--u", "3", "--v", "4", "--layers", "1"];

fn train_small(manifest: &Path, out: &Path, seed: &str) -> Output {
    let mut args = vec!["train", "--manifest", p(manifest), "--out", p(out), "--epochs", "2", "--lr", "1e-3", "--seed", seed];
    args.extend_from_slice(&SMALL_MODEL);
    vagnet(&args)
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);
    let out = dir.path().join("run");
    let o = train_small(&manifest, &out, "1");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("resolved config"));
    assert!(out.join("final.vagw").is_file());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["mean_loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn same_seed_same_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&manifest, &a, "3").status.success());
    assert!(train_small(&manifest, &b, "3").status.success());
    let read = |d: &Path| fs::read(d.join("train_log.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(a.join("final.vagw")).unwrap(), fs::read(b.join("final.vagw")).unwrap());
}

#[test]
fn missing_manifest_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_manifest.toml");
    let o = vagnet(&["train", "--manifest", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_manifest.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_2() {
    let o = vagnet(&["flops", "--not-a-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

/// A checkpoint whose class-1 logit increases with the projection of each
/// frame onto the synthetic drift direction. On noise-free data every
/// positive frame outscores every negative frame.
fn oracle_checkpoint(spec: &SyntheticSpec, path: &Path) {
    let basis = synth_basis(spec).unwrap();
    let config = ModelConfig {
        input_dim: spec.dim,
        d_model: 4,
        layers: 1,
        heads: 1,
        lookback: 0,
        graph_neighbors: 2,
        hidden_dim: 1,
        positional_encoding: false,
        ..Default::default()
    };
    let mut params = ModelParams::<f32>::init(&config, 0).unwrap();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let t = params.get_mut(name).unwrap();
        let fill = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    // h = [s, 1, -1, 0] with s = direction . (x - base); layer norm keeps
    // coordinate 0 increasing in s and zero at s = 0
    let w = params.get_mut("proj.weight").unwrap();
    for (j, d) in basis.direction.iter().enumerate() {
        w.data_mut()[j * 4] = *d;
    }
    let offset: f32 = basis.direction.iter().zip(&basis.base).map(|(d, b)| d * b).sum();
    params.get_mut("proj.bias").unwrap().data_mut().copy_from_slice(&[-offset, 1.0, -1.0, 0.0]);
    // hidden unit = encoded[0] + 10 (always active); logit_1 = 4 * hidden - 41
    params.get_mut("classifier.hidden.weight").unwrap().data_mut()[0] = 1.0;
    params.get_mut("classifier.hidden.bias").unwrap().data_mut()[0] = 10.0;
    params.get_mut("classifier.out.weight").unwrap().data_mut()[1] = 4.0;
    params.get_mut("classifier.out.bias").unwrap().data_mut()[1] = -41.0;
    save_weights(&params, path).unwrap();
}

#[test]
fn oracle_checkpoint_scores_perfect_ap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = vagnet(&["synth", "--out", p(&data), "--n-clips", "20", "--noise", "0", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec = SyntheticSpec { n_clips: 20, noise: 0.0, seed: 5, ..Default::default() };
    let ckpt = dir.path().join("oracle.vagw");
    oracle_checkpoint(&spec, &ckpt);
    let report = dir.path().join("report.json");
    let o = vagnet(&[
        "eval", "--manifest", p(&data.join("manifest.toml")), "--checkpoint", p(&ckpt), "--out", p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("AP=1.0000 mTTA="), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["ap"].as_f64(), Some(1.0));
    for key in ["mtta", "per_threshold_tta", "per_video_tta", "counts"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn eval_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &["--test-fraction", "0.5"]);
    let run = dir.path().join("run");
    assert!(train_small(&manifest, &run, "0").status.success());
    let ckpt = run.join("final.vagw");
    let eval = |threads: &str, out: &Path| {
        vagnet_env(
            &["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(out)],
            &[("VAGNET_THREADS", threads)],
        )
    };
    let (r1, r4) = (dir.path().join("r1.json"), dir.path().join("r4.json"));
    assert!(eval("1", &r1).status.success());
    assert!(eval("4", &r4).status.success());
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r4).unwrap());
    assert_eq!(eval("zero", &r1).status.code(), Some(2));
}

#[test]
fn dimension_mismatch_exits_2_with_both_dims() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("wide");
    let o = vagnet(&["synth", "--out", p(&data), "--n-clips", "2", "--dim", "768", "--frames", "20", "--test-fraction", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("narrow.vagw");
    let config = ModelConfig { input_dim: 32, d_model: 8, heads: 2, ..Default::default() };
    save_weights(&ModelParams::init(&config, 0).unwrap(), &ckpt).unwrap();
    let o = vagnet(&["eval", "--manifest", p(&data.join("manifest.toml")), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("768") && err.contains("32"), "{err}");
}

fn infer_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let features = dir.join("clip.vagf");
    let data: Vec<f32> = (0..50 * 8).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let clip = FeatureSequence::new(Tensor::new(vec![50, 8], data).unwrap(), 10.0, 0, None, "demo").unwrap();
    write_features(&clip, &features).unwrap();
    let ckpt = dir.join("w.vagw");
    let config = ModelConfig { input_dim: 8, d_model: 8, heads: 2, lookback: 5, graph_neighbors: 6, ..Default::default() };
    save_weights(&ModelParams::init(&config, 2).unwrap(), &ckpt).unwrap();
    (features, ckpt)
}

#[test]
fn infer_prints_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (features, ckpt) = infer_fixture(dir.path());
    let o = vagnet(&["infer", "--features", p(&features), "--checkpoint", p(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 50);
    for (t, line) in lines.iter().enumerate() {
        let (idx, prob) = line.split_once(' ').unwrap();
        assert_eq!(idx.parse::<usize>().unwrap(), t);
        assert_eq!(prob.split_once('.').unwrap().1.len(), 6);
        assert!((0.0..=1.0).contains(&prob.parse::<f64>().unwrap()));
    }
}

#[test]
fn streaming_matches_batch() {
    let dir = tempfile::tempdir().unwrap();
    let (features, ckpt) = infer_fixture(dir.path());
    let batch = vagnet(&["infer", "--features", p(&features), "--checkpoint", p(&ckpt)]);
    let stream = vagnet(&["infer", "--features", p(&features), "--checkpoint", p(&ckpt), "--stream", "--timing"]);
    assert!(stream.status.success(), "{}", stderr(&stream));
    assert_eq!(stdout(&batch), stdout(&stream));
    assert!(stderr(&stream).contains("ms/frame"), "{}", stderr(&stream));
}

#[test]
fn corrupt_features_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (features, ckpt) = infer_fixture(dir.path());
    let bytes = fs::read(&features).unwrap();
    fs::write(&features, &bytes[..bytes.len() / 2]).unwrap();
    let o = vagnet(&["infer", "--features", p(&features), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format error at byte"), "{}", stderr(&o));
}

#[test]
fn overflowing_weights_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (features, _) = infer_fixture(dir.path());
    let config = ModelConfig { input_dim: 8, d_model: 8, heads: 2, ..Default::default() };
    let mut params = ModelParams::<f32>::init(&config, 0).unwrap();
    params.get_mut("proj.weight").unwrap().data_mut().iter_mut().for_each(|w| *w = 3e38);
    let ckpt = dir.path().join("huge.vagw");
    save_weights(&params, &ckpt).unwrap();
    let o = vagnet(&["infer", "--features", p(&features), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn flops_table(extra: &[&str]) -> Vec<(String, f64)> {
    let mut args = vec!["flops"];
    args.extend_from_slice(extra);
    let o = vagnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
        .lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let name = parts.next()?;
            let value = parts.next()?.parse::<f64>().ok()?;
            Some((name.to_string(), value))
        })
        .collect()
}

#[test]
fn flops_default_table() {
    let o = vagnet(&["flops"]);
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("total")).unwrap();
    let value = total.split_whitespace().nth(1).unwrap();
    assert_eq!(value.split_once('.').unwrap().1.len(), 3, "{total}");
    assert!(text.contains("head only"));
}

#[test]
fn flops_doubling_width_quadruples_encoder() {
    let base = flops_table(&["--input-dim", "256"]);
    let wide = flops_table(&["--input-dim", "256", "--d-model", "512"]);
    let get = |t: &[(String, f64)], k: &str| t.iter().find(|(n, _)| n == k).unwrap().1;
    let ratio = get(&wide, "encoder") / get(&base, "encoder");
    assert!((3.5..=4.0).contains(&ratio), "{ratio}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[model]\nd_model = 128\nheads = 8\n").unwrap();
    let o = vagnet(&["--config", p(&cfg), "flops", "--heads", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("\"d_model\": 128"), "{err}");
    assert!(err.contains("\"heads\": 2"), "{err}");
    fs::write(&cfg, "[model]\nbogus = 1\n").unwrap();
    assert_eq!(vagnet(&["--config", p(&cfg), "flops"]).status.code(), Some(2));
}
