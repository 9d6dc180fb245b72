use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vffc_core::evalkit;
use vffc_core::pipeline::io::{load_map, load_mask};

const TINY: &str = "\
preset = tiny
subvolume = 4,32,32
cell = 6,48,48
lattice_stride = 16
samples_per_cell = 1
batch_size = 2
epochs = 1
tile = 32
";

fn vffc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vffc"))
        .args(args)
        .env("VFFC_THREADS", "1")
        .output()
        .expect("spawn vffc")
}

fn ok(args: &[&str]) -> Output {
    let out = vffc(args);
    assert!(
        out.status.success(),
        "vffc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    vffc(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: u64, size: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["synth", "--out", s(&out), "--seed", &seed.to_string(), "--size", size]);
    out
}

fn tiny_checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    let a = synth(dir, "a", 1, "6,64,64");
    let b = synth(dir, "b", 2, "6,64,64");
    let cfg = dir.join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&a), "--val", s(&b), "--out", s(&run)]);
    (run.join("checkpoint.vffc"), b)
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_reproducible_and_flags_controls() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 7, "6,64,64");
    let first = read_tree(&a);
    fs::remove_dir_all(&a).unwrap();
    synth(dir.path(), "a", 7, "6,64,64");
    let strip = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        files
            .into_iter()
            .map(|(n, b)| {
                if n == "manifest.txt" {
                    let text = String::from_utf8(b).unwrap();
                    let kept: String = text
                        .lines()
                        .filter(|l| !l.starts_with("started_unix") && !l.starts_with("finished_unix"))
                        .map(|l| format!("{l}\n"))
                        .collect();
                    (n, kept.into_bytes())
                } else {
                    (n, b)
                }
            })
            .collect()
    };
    assert_eq!(strip(first), strip(read_tree(&a)));

    let c = dir.path().join("c");
    ok(&["synth", "--out", s(&c), "--size", "6,64,64", "--delta", "0"]);
    let manifest = fs::read_to_string(c.join("manifest.txt")).unwrap();
    assert!(manifest.contains("control = true"), "{manifest}");
    assert!(fs::read_to_string(a.join("manifest.txt")).unwrap().contains("control = false"));
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 1, "6,64,64");
    assert_eq!(code(&["train", "--data", s(&a), "--out", s(&dir.path().join("r"))]), 2);
    assert_eq!(code(&["synth", "--out", s(&dir.path().join("x")), "--size", "6,64"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let big = "1,64,1024,1024,64";
    assert_eq!(code(&["bench", "--op", "vffc", "--shape", big]), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 1, "6,64,64");
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "preset = tiny\nwidths = 4,x\n").unwrap();
    let out = vffc(&["train", "--config", s(&bad), "--data", s(&a), "--val", s(&a), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let missing = dir.path().join("nope");
    assert_eq!(code(&["eval", "--pred", s(&missing), "--gt", s(&missing), "--out", s(&dir.path().join("r.csv"))]), 3);
}

#[test]
fn numeric_failure_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 1, "6,64,64");
    let b = synth(dir.path(), "b", 2, "6,64,64");
    let cfg = dir.path().join("hot.txt");
    fs::write(&cfg, format!("{TINY}lr = 1e300\n")).unwrap();
    let out = vffc(&["train", "--config", s(&cfg), "--data", s(&a), "--val", s(&b), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_of_perfect_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 3, "6,64,64");
    let gt = a.join("mask.pgm");
    let report = dir.path().join("r.csv");
    ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[1..4], ["1.000000", "1.000000", "inf"], "{text}");
    assert!(Path::new(&format!("{}.manifest", s(&report))).exists());

    let truth = load_mask(&gt).unwrap();
    let empty = dir.path().join("empty.pgm");
    vffc_core::pipeline::io::save_map(&empty, truth.height, truth.width, &vec![0.0; truth.data.len()]).unwrap();
    ok(&["eval", "--pred", s(&empty), "--gt", s(&gt), "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[1..3], ["0.000000", "0.000000"]);
    let psnr: f64 = row[3].parse().unwrap();
    let expect = evalkit::psnr_binary(&vec![0; truth.data.len()], &truth.data).unwrap();
    assert!(psnr.is_finite() && (psnr - expect).abs() < 1e-5, "{psnr} vs {expect}");
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 3, "6,64,64");
    let b = synth(dir.path(), "b", 3, "6,64,72");
    let out = dir.path().join("r.csv");
    assert_eq!(code(&["eval", "--pred", s(&a.join("mask.pgm")), "--gt", s(&b.join("mask.pgm")), "--out", s(&out)]), 3);
}

#[test]
fn predict_outputs_agree_and_small_volumes_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, vol) = tiny_checkpoint(dir.path());
    let map = dir.path().join("map.pgm");
    let prob = dir.path().join("prob.pgm");
    let raw = dir.path().join("prob.raw");
    ok(&[
        "predict", "--ckpt", s(&ckpt), "--volume", s(&vol), "--out", s(&map), "--prob-out", s(&prob), "--raw", s(&raw),
        "--tile", "32",
    ]);
    let binary = load_mask(&map).unwrap();
    let (_, _, quantized) = load_map(&prob).unwrap();
    let mut f = fs::File::open(&raw).unwrap();
    let (shape, exact) = vffc_core::container::read_raw(&mut f).unwrap();
    assert_eq!(shape, vec![64, 64]);
    for i in 0..exact.len() {
        assert_eq!(binary.data[i], (exact[i] >= 0.5) as u8);
        // Quantization can only move pixels that sit in the bin straddling 0.5.
        if (exact[i] - 0.5).abs() > 1.0 / 255.0 {
            assert_eq!(binary.data[i], (quantized[i] >= 0.5) as u8, "pixel {i}");
        }
    }
    assert!(Path::new(&format!("{}.manifest", s(&map))).exists());

    assert_eq!(code(&["predict", "--ckpt", s(&ckpt), "--volume", s(&vol), "--out", s(&map)]), 3);
}

#[test]
fn sweep_writes_a_matrix_and_checks_the_region() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, vol) = tiny_checkpoint(dir.path());
    let out = dir.path().join("sweep.csv");
    ok(&["sweep", "--ckpt", s(&ckpt), "--volume", s(&vol), "--region", "0,0", "--size", "32", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("z,"));
    // One row per input slice, one column per start of the 4-deep window.
    assert_eq!(text.lines().next().unwrap(), "z,0,1,2");
    assert_eq!(text.lines().count(), 1 + 6);
    assert_eq!(
        code(&["sweep", "--ckpt", s(&ckpt), "--volume", s(&vol), "--region", "40,0", "--size", "32", "--out", s(&out)]),
        3
    );
}

#[test]
fn bench_single_iteration_emits_one_row_per_phase() {
    for op in ["vffc", "stffc", "sffc", "conv3d"] {
        let out = ok(&["bench", "--op", op, "--shape", "1,4,16,16,8", "--iters", "1", "--seed", "3"]);
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "op,phase,shape,iters,median_ms,p10_ms,p90_ms,output_sum");
        assert_eq!(lines.len(), 3, "{text}");
        assert!(lines[1].starts_with(&format!("{op},forward,")));
        assert!(lines[2].starts_with(&format!("{op},forward_backward,")));
        let again = String::from_utf8(ok(&["bench", "--op", op, "--shape", "1,4,16,16,8", "--iters", "1", "--seed", "3"]).stdout).unwrap();
        let sum = |t: &str| t.lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string();
        assert_eq!(sum(&text), sum(&again));
    }
}
