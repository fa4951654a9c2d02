use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bootplace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bootplace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bootplace(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
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

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gen(dir: &Path, scenes: usize, seed: u64) {
    ok(&[
        "gen-data",
        "--out",
        s(dir),
        "--scenes",
        &scenes.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
}

fn train(data: &Path, out: &Path, steps: u64, extra: &[&str]) -> Output {
    let steps = steps.to_string();
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--preset",
        "desk",
        "--steps",
        &steps,
    ];
    args.extend_from_slice(extra);
    bootplace(&args)
}

/// A dataset and a model trained on it for a few steps.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3, 5);
    let run = tmp.path().join("run");
    let out = train(&data, &run, 2, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (tmp, data, run.join("checkpoint"))
}

#[test]
fn gen_data_writes_one_directory_per_scene() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    gen(&dir, 10, 1);
    assert_eq!(std::fs::read_dir(dir.join("scenes")).unwrap().count(), 10);
    let m = read_json(&dir.join("run.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 1);
    assert!(m["input_hash"].as_str().unwrap().starts_with("sha256:"));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    gen(&a, 4, 9);
    gen(&b, 4, 9);
    gen(&c, 4, 10);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn invalid_config_field_exits_2_naming_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[scene]\nimage_sise = 32\n").unwrap();
    let out = bootplace(&[
        "gen-data",
        "--out",
        s(&tmp.path().join("d")),
        "--scenes",
        "1",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("image_sise"));

    std::fs::write(&cfg, "[scene]\nimage_size = 32\n").unwrap();
    ok(&[
        "gen-data",
        "--out",
        s(&tmp.path().join("d")),
        "--scenes",
        "1",
        "--config",
        s(&cfg),
    ]);
    let m = read_json(&tmp.path().join("d/run.json"));
    assert_eq!(m["config"]["scene"]["image_size"], 32);
}

#[test]
fn unwritable_output_exits_5() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let out = bootplace(&["gen-data", "--out", s(&file.join("sub")), "--scenes", "1"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn bad_thread_count_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_bootplace"))
        .args(["gen-data", "--out", "/nonexistent", "--scenes", "1"])
        .env("BOOTPLACE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn training_is_deterministic_and_echoes_the_preset() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3, 2);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = train(&data, dir, 3, &["--seed", "4"]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(tree(&a), tree(&b));
    let m = read_json(&a.join("run.json"));
    assert_eq!(m["config"]["preset"], "desk");
    assert_eq!(m["config"]["model"]["d_model"], 64);
    assert_eq!(m["config"]["train"]["steps"], 3);
    assert_eq!(m["seed"], 4);
    assert_eq!(
        m["input_hash"],
        read_json(&b.join("run.json"))["input_hash"]
    );
}

#[test]
fn resume_continues_the_step_counter() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3, 2);
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nlog_every = 1\n").unwrap();
    let (split, whole) = (tmp.path().join("split"), tmp.path().join("whole"));
    assert!(train(&data, &split, 2, &["--config", s(&cfg)])
        .status
        .success());
    let out = train(&data, &split, 4, &["--config", s(&cfg), "--resume"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(train(&data, &whole, 4, &["--config", s(&cfg)])
        .status
        .success());
    let steps: Vec<u64> = std::fs::read_to_string(split.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [1, 2, 3, 4]);
    let manifest = read_json(&split.join("checkpoint/manifest.json"));
    assert_eq!(manifest["training"]["step"], 4);
    assert_eq!(
        std::fs::read(split.join("checkpoint/weights.bin")).unwrap(),
        std::fs::read(whole.join("checkpoint/weights.bin")).unwrap()
    );
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 2);
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[train]\nlr = 1e30\nbackbone_lr = 1e30\ngrad_clip = 1e30\n",
    )
    .unwrap();
    let out = train(&data, &tmp.path().join("run"), 50, &["--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_repose_scores_one_for_every_k() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3, 3);
    let report = tmp.path().join("r/report.json");
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--oracle",
        "--protocol",
        "repose",
        "--k",
        "1,5",
        "--out",
        s(&report),
    ]);
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout, read_json(&report));
    let r = &stdout["report"];
    assert_eq!(r["iou_at_k"]["1"], 1.0);
    assert_eq!(r["iou_at_k"]["5"], 1.0);
    assert_eq!(r["iou50_at_k"]["1"], 1.0);
    assert_eq!(r["iou_at_k"].as_object().unwrap().len(), 2);
    assert!(tmp.path().join("r/report.run.json").is_file());
}

#[test]
fn place_protocol_needs_two_scenes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1, 3);
    let report = tmp.path().join("report.json");
    let out = bootplace(&[
        "eval",
        "--data",
        s(&data),
        "--oracle",
        "--protocol",
        "place",
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 2);
    gen(&data, 2, 3);
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--oracle",
        "--protocol",
        "place",
        "--k",
        "1",
        "--out",
        s(&report),
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!v["report"]["overfit"].as_array().unwrap().is_empty());
}

#[test]
fn eval_with_checkpoint_and_incompatibilities() {
    let (tmp, data, ckpt) = fixture();
    let report = tmp.path().join("report.json");
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--k",
        "1,5",
        "--out",
        s(&report),
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["1", "5"] {
        let x = v["report"]["iou_at_k"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }

    let out = bootplace(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--k",
        "17",
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 2);

    let small = tmp.path().join("small");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[scene]\nimage_size = 32\n").unwrap();
    ok(&[
        "gen-data",
        "--out",
        s(&small),
        "--scenes",
        "2",
        "--config",
        s(&cfg),
    ]);
    let out = bootplace(&[
        "eval",
        "--data",
        s(&small),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = ckpt.join("manifest.json");
    let text = std::fs::read_to_string(&manifest)
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&manifest, text).unwrap();
    let out = bootplace(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&manifest),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_patch(path: &Path, w: u32, h: u32, color: [u8; 4]) {
    image::RgbaImage::from_pixel(w, h, image::Rgba(color))
        .save(path)
        .unwrap();
}

#[test]
fn place_writes_composite_and_placements() {
    let (tmp, data, ckpt) = fixture();
    let background = data
        .join("scenes")
        .read_dir()
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path()
        .join("background.png");
    let objects = tmp.path().join("objects");
    std::fs::create_dir_all(&objects).unwrap();
    write_patch(&objects.join("a.png"), 10, 6, [250, 10, 10, 255]);
    let out_png = tmp.path().join("out/composite.png");
    ok(&[
        "place",
        "--ckpt",
        s(&ckpt),
        "--background",
        s(&background),
        "--objects",
        s(&objects),
        "--out",
        s(&out_png),
    ]);
    let composite = image::open(&out_png).unwrap().to_rgb8();
    assert_eq!(composite.dimensions(), (64, 64));
    let v = read_json(&out_png.with_extension("json"));
    let entries = v["placements"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["object"], "a.png");
    let p = entries[0]["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    if !entries[0]["proposal"].is_null() {
        let bg = image::open(&background).unwrap().to_rgb8();
        assert_ne!(composite, bg, "the placed object changes the image");
    }

    write_patch(&objects.join("b.png"), 4, 12, [10, 250, 10, 255]);
    ok(&[
        "place",
        "--ckpt",
        s(&ckpt),
        "--background",
        s(&background),
        "--objects",
        s(&objects),
        "--policy",
        "greedy-distinct",
        "--out",
        s(&out_png),
    ]);
    let v = read_json(&out_png.with_extension("json"));
    let entries = v["placements"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let chosen: Vec<&Value> = entries
        .iter()
        .map(|e| &e["proposal"])
        .filter(|p| !p.is_null())
        .collect();
    if chosen.len() == 2 {
        assert_ne!(chosen[0], chosen[1]);
        assert_ne!(entries[0]["bbox"], entries[1]["bbox"]);
    }
    for e in entries {
        assert!((0.0..=1.0).contains(&e["probability"].as_f64().unwrap()));
    }

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = bootplace(&[
        "place",
        "--ckpt",
        s(&ckpt),
        "--background",
        s(&background),
        "--objects",
        s(&empty),
        "--out",
        s(&out_png),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn visualize_writes_one_heatmap_per_query_deterministically() {
    let (tmp, data, ckpt) = fixture();
    let scene = data
        .join("scenes")
        .read_dir()
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let (a, b) = (tmp.path().join("va"), tmp.path().join("vb"));
    for dir in [&a, &b] {
        ok(&[
            "visualize",
            "--ckpt",
            s(&ckpt),
            "--scene",
            s(&scene),
            "--out",
            s(dir),
        ]);
    }
    assert_eq!(std::fs::read_dir(a.join("attention")).unwrap().count(), 16);
    let proposals = read_json(&a.join("proposals.json"));
    assert_eq!(proposals.as_array().unwrap().len(), 16);
    let overlay = image::open(a.join("proposals.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (256, 256));
    assert_eq!(tree(&a), tree(&b));
}
