use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use binsep::separator::LavssModel;
use binsep::wav::read_wav;
use binsep::{ModelConfig, ModelFlags, Preset};
use binsep_tensornn::Checkpoint;

fn binsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binsep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = binsep(args);
    assert!(
        out.status.success(),
        "binsep {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path, name: &str, scenes: usize, seed: u64) -> PathBuf {
    let d = dir.join(name);
    ok(&["--preset", "tiny", "--seed", &seed.to_string(), "gen-data", "--out", s(&d), "--scenes", &scenes.to_string()]);
    d
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn metrics(path: &Path) -> (Vec<String>, Vec<f64>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let sdr = r.records().map(|rec| rec.unwrap()[3].parse().unwrap()).collect();
    (header, sdr)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn gen_data_writes_the_requested_scenes() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 10, 4);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 10);
    // Two stereo-plus-mono object pairs per scene.
    assert_eq!(std::fs::read_dir(d.join("wav")).unwrap().count(), 40);
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let a = files(&tiny_data(t.path(), "a", 6, 21));
    let b = files(&tiny_data(t.path(), "b", 6, 21));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    assert!(a == b, "same seed produced different bytes");
    let c = files(&tiny_data(t.path(), "c", 6, 22));
    assert!(a != c);
}

#[test]
fn gen_data_rejects_zero_scenes_and_occupied_dirs() {
    let t = tempfile::tempdir().unwrap();
    let out = binsep(&["--preset", "tiny", "gen-data", "--out", s(&t.path().join("z")), "--scenes", "0"]);
    assert_eq!(code(&out), 2);
    let d = tiny_data(t.path(), "d", 3, 0);
    let again = binsep(&["--preset", "tiny", "gen-data", "--out", s(&d), "--scenes", "3"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["--preset", "tiny", "--seed", "1", "gen-data", "--out", s(&d), "--scenes", "4", "--force"]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 4);
}

#[test]
fn zero_epochs_saves_the_initialisation() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 6, 2);
    let ck = t.path().join("m.ckpt");
    ok(&["--seed", "7", "train", "--data", s(&d), "--out", s(&ck), "--epochs", "0"]);
    let fresh = LavssModel::new(&ModelConfig::preset(Preset::Tiny), ModelFlags::FULL, 7).unwrap();
    assert_eq!(Checkpoint::load(&ck).unwrap().to_bytes(), fresh.checkpoint().to_bytes());
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(t.path().join("m.ckpt.json")).unwrap()).unwrap();
    assert_eq!(side["logs"].as_array().unwrap().len(), 0);
    assert_eq!(side["model"]["preset"], "tiny");
}

#[test]
fn training_is_deterministic_and_logged() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 6, 2);
    let (a, b) = (t.path().join("a.ckpt"), t.path().join("b.ckpt"));
    for ck in [&a, &b] {
        ok(&["--seed", "3", "train", "--data", s(&d), "--out", s(ck), "--epochs", "2", "--no-position"]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(t.path().join("a.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,loss_freq,loss_time,loss_total"));
}

#[test]
fn oracle_masks_beat_the_mixture() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 8, 5);
    let (o, b) = (t.path().join("oracle.csv"), t.path().join("baseline.csv"));
    ok(&["eval", "--data", s(&d), "--oracle", "--split", "all", "--out", s(&o)]);
    ok(&["eval", "--data", s(&d), "--baseline", "--split", "all", "--out", s(&b)]);
    let (header, oracle) = metrics(&o);
    let (_, base) = metrics(&b);
    assert_eq!(header, ["scene_id", "source_id", "channel", "sdr_db", "sir_db"]);
    assert_eq!(oracle.len(), 8 * 2 * 2);
    assert!(mean(&oracle) > mean(&base), "oracle {} vs baseline {}", mean(&oracle), mean(&base));
}

#[test]
fn mono_pretraining_feeds_binaural_training() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 6, 8);
    let mono = t.path().join("mono.ckpt");
    let bad = binsep(&["--set", "use_ipd=true", "pretrain-mono", "--data", s(&d), "--out", s(&mono)]);
    assert_eq!(code(&bad), 2);
    ok(&["pretrain-mono", "--data", s(&d), "--out", s(&mono), "--epochs", "1"]);
    let full = t.path().join("full.ckpt");
    ok(&["train", "--data", s(&d), "--out", s(&full), "--from-mono", s(&mono), "--epochs", "1"]);
    // A binaural checkpoint cannot seed another binaural run as if it were mono.
    let wrong = binsep(&["train", "--data", s(&d), "--out", s(&t.path().join("x.ckpt")), "--from-mono", s(&full)]);
    assert_eq!(code(&wrong), 2);
    let csv = t.path().join("mono.csv");
    ok(&["eval", "--data", s(&d), "--checkpoint", s(&mono), "--split", "all", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",mono,")));
}

#[test]
fn checkpoint_mismatch_lists_the_offending_dims() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 4, 1);
    let ck = t.path().join("m.ckpt");
    ok(&["train", "--data", s(&d), "--out", s(&ck), "--epochs", "0"]);
    let out = binsep(&["--set", "octaves=3", "eval", "--data", s(&d), "--checkpoint", s(&ck), "--out", s(&t.path().join("e.csv"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[16, 64]") && err.contains("[16, 12]"), "{err}");
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 4, 1);
    let csv = t.path().join("e.csv");
    assert_eq!(code(&binsep(&["--set", "bogus=1", "eval", "--data", s(&d), "--oracle", "--out", s(&csv)])), 2);
    assert_eq!(code(&binsep(&["eval", "--data", s(&d), "--out", s(&csv)])), 2);
    assert_eq!(code(&binsep(&["eval", "--data", s(&t.path().join("missing")), "--oracle", "--out", s(&csv)])), 3);
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, "lr = 1e30\nepochs = 2\n").unwrap();
    let nan = binsep(&["--config", s(&cfg), "train", "--data", s(&d), "--out", s(&t.path().join("n.ckpt"))]);
    assert_eq!(code(&nan), 4, "{}", String::from_utf8_lossy(&nan.stderr));
    let threads = Command::new(env!("CARGO_BIN_EXE_binsep"))
        .args(["eval", "--data", s(&d), "--oracle", "--out", s(&csv)])
        .env("BINSEP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
    let one = Command::new(env!("CARGO_BIN_EXE_binsep"))
        .args(["eval", "--data", s(&d), "--oracle", "--split", "all", "--out", s(&csv)])
        .env("BINSEP_THREADS", "1")
        .output()
        .unwrap();
    assert!(one.status.success());
}

#[test]
fn separate_writes_one_stereo_track_per_object() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 4, 6);
    let ck = t.path().join("m.ckpt");
    ok(&["train", "--data", s(&d), "--out", s(&ck), "--epochs", "1"]);
    let out = t.path().join("sep");
    ok(&["separate", "--checkpoint", s(&ck), "--data", s(&d), "--scene", "1", "--out", s(&out)]);
    let mix = read_wav(out.join("mixture.wav")).unwrap();
    let tracks: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("object"))
        .collect();
    assert_eq!(tracks.len(), 2);
    for p in tracks {
        let w = read_wav(&p).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].len(), mix[0].len());
    }
    let missing = binsep(&["separate", "--checkpoint", s(&ck), "--data", s(&d), "--scene", "40", "--out", s(&out)]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn render_spec_is_bit_exact() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 3, 9);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["render-spec", "--data", s(&d), "--scene", "0", "--out", s(&a)]);
    ok(&["render-spec", "--data", s(&d), "--scene", "0", "--out", s(&b)]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 2 + 2 * 2 * 2);
    assert!(fa == fb);
    let cfg = ModelConfig::preset(Preset::Tiny);
    let dec = png::Decoder::new(std::io::Cursor::new(fa[Path::new("mixture_left.png")].clone()));
    let mut reader = dec.read_info().unwrap();
    let info = reader.info();
    assert_eq!((info.width as usize, info.height as usize), (cfg.frames, cfg.f_lin()));
    assert_eq!(info.color_type, png::ColorType::Grayscale);
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    reader.next_frame(&mut buf).unwrap();
    assert!(buf.iter().any(|&p| p > 0), "mixture renders as all black");
}

#[test]
fn ablation_emits_one_row_per_cell() {
    let t = tempfile::tempdir().unwrap();
    let d = tiny_data(t.path(), "d", 6, 3);
    let out = t.path().join("ablation.csv");
    ok(&["ablation", "--data", s(&d), "--out", s(&out), "--epochs", "1", "--split", "all"]);
    let mut r = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    let cells: std::collections::BTreeSet<(String, String, String)> =
        rows.iter().map(|x| (x[0].to_string(), x[1].to_string(), x[2].to_string())).collect();
    assert_eq!(cells.len(), 8);
    assert!(rows.iter().all(|x| x[5].parse::<f64>().unwrap().is_finite()));
}
