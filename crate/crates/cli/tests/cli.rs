//! End-to-end runs of the `fse` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fse_core::imaging::{load_image, save_image};
use fse_core::metrics::MetricReport;
use fse_core::synth::procedural_face;
use fse_core::train::LossRecord;
use tempfile::TempDir;

fn fse(args: &[&str]) -> Output {
    fse_env(args, None)
}

fn fse_env(args: &[&str], output_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fse"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("FSE_OUTPUT_ROOT");
    if let Some(root) = output_root {
        cmd.env("FSE_OUTPUT_ROOT", root);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn clean_dir(root: &Path, n: usize, size: usize) -> PathBuf {
    let dir = root.join("clean");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        save_image(&procedural_face(i as u64, size).unwrap(), &dir.join(format!("face{i}.png"))).unwrap();
    }
    dir
}

fn synth_dataset(root: &Path, name: &str, faces: usize, seed: u64) -> PathBuf {
    let out = root.join(name);
    let o = fse(&["synth", "--procedural", &faces.to_string(), "--size", "32", "--seed", &seed.to_string(), "--out", s(&out)]);
    assert_ok(&o);
    out
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in files(dir) {
        let p = dir.join(&sub);
        if p.is_dir() {
            for (n, b) in tree_bytes(&p) {
                out.push((format!("{sub}/{n}"), b));
            }
        } else {
            out.push((sub, fs::read(p).unwrap()));
        }
    }
    out
}

/// Small, fast model on 32-pixel crops.
fn write_config(dir: &Path, data: &Path, total_steps: usize, extra_train: &str) -> PathBuf {
    let text = format!(
        "profile = \"desk\"\nseed = 3\nperceptual_backend = \"fallback\"\n\n\
         [data]\ntrain_dir = \"{}\"\n\n\
         [model.mask]\nbase_channels = 8\nnum_residual_blocks = 1\n\
         [model.coarse]\nbase_channels = 8\nnum_agg_blocks = 2\ndilation_rates = [1, 2]\nnum_experts = 2\n\
         [model.refine]\nembed_dim = 8\nirc_hidden = 4\n\n\
         [train]\ntotal_steps = {total_steps}\nbatch_size = 1\ncrop_size = 32\n{extra_train}",
        data.display()
    );
    let path = dir.join(format!("run-{total_steps}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn loss_log(dir: &Path) -> Vec<LossRecord> {
    fs::read_to_string(dir.join("loss.log"))
        .unwrap()
        .lines()
        .map(|l| LossRecord::parse(l).unwrap())
        .collect()
}

#[test]
fn synth_counts_sidecars_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let clean = clean_dir(tmp.path(), 3, 40);
    let out = tmp.path().join("a");
    let o = fse(&["synth", "--clean", s(&clean), "--count", "2", "--seed", "5", "--out", s(&out)]);
    assert_ok(&o);
    for sub in ["shadow", "target", "mask"] {
        assert_eq!(files(&out.join(sub)).len(), 6, "{sub}");
    }
    let specs = files(&out.join("spec"));
    assert_eq!(specs.len(), 6);
    assert!(specs.iter().all(|f| f.ends_with(".json")));
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("spec").join(&specs[0])).unwrap()).unwrap();
    assert!(record["spec"]["opacity"].as_f64().is_some());
    let text = stdout(&o);
    assert!(text.contains("wrote 6 pairs") && text.contains("opacity") && text.contains("feather"), "{text}");

    let again = tmp.path().join("b");
    assert_ok(&fse(&["synth", "--clean", s(&clean), "--count", "2", "--seed", "5", "--out", s(&again)]));
    assert_eq!(tree_bytes(&out), tree_bytes(&again));
}

#[test]
fn synth_validation_errors() {
    let tmp = TempDir::new().unwrap();
    let clean = clean_dir(tmp.path(), 1, 32);
    let o = fse(&["synth", "--clean", s(&clean), "--count", "0", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("count must be positive"));
    let o = fse(&["synth", "--clean", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"));
    assert_eq!(fse(&["synth"]).status.code(), Some(2));
    assert_eq!(fse(&["bogus"]).status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_log_then_resumes_without_gaps() {
    let tmp = TempDir::new().unwrap();
    let data = synth_dataset(tmp.path(), "data", 2, 1);
    let cfg10 = write_config(tmp.path(), &data, 10, "");
    let full = tmp.path().join("full");
    assert_ok(&fse(&["train", "--config", s(&cfg10), "--out", s(&full)]));
    assert!(full.join("checkpoint.fse").is_file());
    let log = loss_log(&full);
    assert_eq!(log.len(), 10);
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());

    let cfg4 = write_config(tmp.path(), &data, 4, "");
    let part = tmp.path().join("part");
    assert_ok(&fse(&["train", "--config", s(&cfg4), "--out", s(&part)]));
    assert_eq!(loss_log(&part).len(), 4);
    let ckpt = part.join("checkpoint.fse");
    assert_ok(&fse(&["train", "--config", s(&cfg10), "--resume", s(&ckpt), "--out", s(&part)]));
    // the 4-step run decays its own schedule, so only the step sequence and
    // the first records are comparable with the uninterrupted run
    let resumed = loss_log(&part);
    assert_eq!(resumed.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert_eq!(resumed[0], log[0]);
}

#[test]
fn resume_of_same_budget_is_bitwise_continuation() {
    let tmp = TempDir::new().unwrap();
    let data = synth_dataset(tmp.path(), "data", 2, 4);
    let cfg = write_config(tmp.path(), &data, 6, "checkpoint_every = 3\n");
    let full = tmp.path().join("full");
    assert_ok(&fse(&["train", "--config", s(&cfg), "--out", s(&full)]));
    let mid = full.join("checkpoints").join("step-000003.fse");
    assert!(mid.is_file());
    let other = tmp.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let head: Vec<String> = fs::read_to_string(full.join("loss.log")).unwrap().lines().take(3).map(String::from).collect();
    fs::write(other.join("loss.log"), head.join("\n") + "\n").unwrap();
    assert_ok(&fse(&["train", "--config", s(&cfg), "--resume", s(&mid), "--out", s(&other)]));
    assert_eq!(fs::read(full.join("loss.log")).unwrap(), fs::read(other.join("loss.log")).unwrap());
    assert_eq!(fs::read(full.join("checkpoint.fse")).unwrap(), fs::read(other.join("checkpoint.fse")).unwrap());
}

#[test]
fn train_rejects_unknown_key_by_name() {
    let tmp = TempDir::new().unwrap();
    let data = synth_dataset(tmp.path(), "data", 1, 0);
    let cfg = write_config(tmp.path(), &data, 2, "lrr = 0.1\n");
    let o = fse(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lrr"), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let tmp = TempDir::new().unwrap();
    let data = synth_dataset(tmp.path(), "data", 1, 0);
    let cfg = write_config(tmp.path(), &data, 20, "lr_init = 1e30\n");
    let o = fse(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at step"), "{}", stderr(&o));
}

fn trained_checkpoint(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = synth_dataset(tmp, "data", 2, 2);
    let cfg = write_config(tmp, &data, 2, "");
    let run = tmp.join("run");
    assert_ok(&fse(&["train", "--config", s(&cfg), "--out", s(&run)]));
    (run.join("checkpoint.fse"), data)
}

#[test]
fn eval_report_determinism_and_resolution() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data) = trained_checkpoint(tmp.path());
    let a = tmp.path().join("eval_a");
    let b = tmp.path().join("eval_b");
    for out in [&a, &b] {
        let o = fse(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(out)]);
        assert_ok(&o);
        assert!(stdout(&o).contains("lpips_proxy="));
    }
    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    assert_eq!(report, fs::read_to_string(b.join("report.txt")).unwrap());
    let parsed = MetricReport::from_text(&report).unwrap();
    assert!(parsed.proxy && parsed.n_samples == 2);

    let r = tmp.path().join("eval_r");
    assert_ok(&fse(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--resolution", "48", "--out", s(&r)]));
    for f in files(&r.join("restored")) {
        assert_eq!(load_image(&r.join("restored").join(f)).unwrap().dims(), (1, 3, 48, 48));
    }

    fs::copy(data.join("shadow").join("face0000_000.png"), data.join("shadow").join("orphan.png")).unwrap();
    let o = fse(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&r)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("orphan"));
}

#[test]
fn infer_outputs_match_inputs() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, _) = trained_checkpoint(tmp.path());
    let inputs = tmp.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    for i in 0..5 {
        save_image(&procedural_face(50 + i, 32 + 4 * i as usize).unwrap(), &inputs.join(format!("in{i}.png"))).unwrap();
    }
    let out = tmp.path().join("restored");
    assert_ok(&fse(&["infer", "--checkpoint", s(&ckpt), s(&inputs), "--save-mask", "--out", s(&out)]));
    for i in 0..5usize {
        let r = load_image(&out.join(format!("in{i}.png"))).unwrap();
        assert_eq!(r.dims(), (1, 3, 32 + 4 * i, 32 + 4 * i));
        let m = image::open(out.join(format!("in{i}_mask.png"))).unwrap();
        assert_eq!(m.color(), image::ColorType::L8);
    }
    assert_eq!(files(&out).len(), 10);

    let bad = tmp.path().join("broken.png");
    fs::write(&bad, b"nope").unwrap();
    let o = fse(&["infer", "--checkpoint", s(&ckpt), s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.png"));
}

#[test]
fn output_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("root");
    assert_ok(&fse_env(&["synth", "--procedural", "1", "--size", "32"], Some(&root)));
    assert_eq!(files(&root.join("synth").join("shadow")).len(), 1);
}

#[test]
fn report_renders_aligned_table() {
    let tmp = TempDir::new().unwrap();
    let mk = |name: &str, psnr: f64, proxy: bool| {
        let r = MetricReport {
            psnr,
            ssim: 0.9,
            mse: 1e-3,
            lpips: Some(0.05),
            proxy,
            n_samples: 4,
        };
        let p = tmp.path().join(name);
        fs::write(&p, r.to_text()).unwrap();
        p
    };
    let a = mk("a.txt", 30.0, true);
    let b = mk("b.txt", 25.5, true);
    let table_path = tmp.path().join("table.txt");
    let o = fse(&[
        "report",
        &format!("fse/synthetic={}", s(&a)),
        &format!("identity/synthetic={}", s(&b)),
        "--out",
        s(&table_path),
    ]);
    assert_ok(&o);
    let table = stdout(&o);
    assert_eq!(table, fs::read_to_string(&table_path).unwrap());
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("synthetic") && lines[1].contains("PSNR"));
    assert!(lines[2].starts_with("fse") && lines[3].starts_with("identity"));
    let w = lines[0].len();
    assert!(lines[..4].iter().all(|l| l.len() == w), "{table}");
    let o = fse(&["report", s(&tmp.path().join("none.txt"))]);
    assert_eq!(o.status.code(), Some(2));
}
