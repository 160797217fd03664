use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmpipe_core::manifest::write_manifest;
use mmpipe_core::merge::{Tensor, TensorContainer};
use mmpipe_core::search::SearchReport;
use mmpipe_core::{ImageSpec, SampleRecord};
use serde_json::Value;
use tempfile::TempDir;

fn mmpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmpipe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        stderr(out)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// Deterministic mixed workload: text lengths from a small LCG, an image on
// every third sample.
fn workload(n: u64) -> Vec<SampleRecord> {
    let mut x = 12345u64;
    (0..n)
        .map(|i| {
            x = x
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let mut r = SampleRecord::text_only("mix", i, 50 + (x >> 33) % 3000);
            if i % 3 == 0 {
                let w = 100 + (x >> 20) % 900;
                let h = 100 + (x >> 40) % 900;
                r.images.push(ImageSpec { width: w, height: h });
            }
            r
        })
        .collect()
}

fn write_records(dir: &Path, name: &str, records: &[SampleRecord]) -> PathBuf {
    let path = dir.join(name);
    let mut buf = Vec::new();
    write_manifest(&mut buf, records).unwrap();
    fs::write(&path, buf).unwrap();
    path
}

fn make_plan(dir: &Path, manifest: &Path, ranks: usize, seed: u64) -> PathBuf {
    let plan = dir.join(format!("plan-{ranks}-{seed}.json"));
    ok(&mmpipe(&[
        "plan",
        "--manifest",
        s(manifest),
        "--dp-ranks",
        &ranks.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&plan),
    ]));
    plan
}

fn pack_cmd<'a>(
    sub: &'a str,
    manifest: &'a Path,
    plan: &'a Path,
    state: &'a Path,
    out: &'a Path,
) -> Vec<&'a str> {
    vec![
        sub,
        "--manifest",
        s(manifest),
        "--plan",
        s(plan),
        "--rank",
        "1",
        "--state",
        s(state),
        "--out",
        s(out),
    ]
}

#[test]
fn plan_balances_ranks() {
    let dir = TempDir::new().unwrap();
    let manifest = write_records(dir.path(), "m.jsonl", &workload(10));
    let plan = dir.path().join("plan.json");
    let out = mmpipe(&[
        "plan",
        "--manifest",
        s(&manifest),
        "--dp-ranks",
        "4",
        "--out",
        s(&plan),
    ]);
    ok(&out);
    let sizes: Vec<u64> = stdout_json(&out)["shard_sizes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(sizes.iter().sum::<u64>(), 10);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert!(plan.exists());
}

#[test]
fn plan_errors_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = mmpipe(&[
        "plan",
        "--manifest",
        s(&missing),
        "--dp-ranks",
        "2",
        "--out",
        "p.json",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(s(&missing)));
    let line: Value = serde_json::from_str(stderr(&out).lines().next().unwrap()).unwrap();
    assert_eq!(line["error"], "io");

    let manifest = write_records(dir.path(), "m.jsonl", &workload(3));
    let plan = dir.path().join("p.json");
    let out = mmpipe(&[
        "plan",
        "--manifest",
        s(&manifest),
        "--dp-ranks",
        "0",
        "--out",
        s(&plan),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!plan.exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mmpipe(&["plan", "--bogus"]).status.code(), Some(1));
    let out = mmpipe(&[
        "stats",
        "--manifest",
        "m",
        "--preset",
        "sft-2k",
        "--seq-len",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(mmpipe(&["--help"]).status.code(), Some(0));
}

#[test]
fn interrupted_pack_resumes_byte_identically() {
    let dir = TempDir::new().unwrap();
    let manifest = write_records(dir.path(), "m.jsonl", &workload(400));
    let plan = make_plan(dir.path(), &manifest, 2, 7);

    let ref_state = dir.path().join("ref-state.json");
    let ref_out = dir.path().join("ref.jsonl");
    ok(&mmpipe(&pack_cmd("pack", &manifest, &plan, &ref_state, &ref_out)));
    let reference = fs::read(&ref_out).unwrap();
    assert!(reference.iter().filter(|&&b| b == b'\n').count() > 10);

    let state = dir.path().join("state.json");
    let out = dir.path().join("packs.jsonl");
    let mut first = pack_cmd("pack", &manifest, &plan, &state, &out);
    first.extend(["--max-packs", "3"]);
    let summary = stdout_json(&mmpipe(&first));
    assert_eq!(summary["complete"], false);
    assert!(summary["packs_written"].as_u64().unwrap() >= 3);

    // A crash between writing packs and persisting state leaves lines the
    // state does not know about.
    let mut stale = fs::read(&out).unwrap();
    let last_line = stale[..stale.len() - 1]
        .rsplit(|&b| b == b'\n')
        .next()
        .unwrap()
        .to_vec();
    stale.extend_from_slice(&last_line);
    stale.extend_from_slice(b"\n{\"pack_id\":99,\"entr");
    fs::write(&out, stale).unwrap();

    let mut rounds = 0;
    loop {
        let mut cmd = pack_cmd("resume", &manifest, &plan, &state, &out);
        cmd.extend(["--max-packs", "2"]);
        let o = mmpipe(&cmd);
        ok(&o);
        rounds += 1;
        if stdout_json(&o)["complete"] == true {
            break;
        }
        assert!(rounds < 1000);
    }
    assert!(rounds > 1);
    assert_eq!(fs::read(&out).unwrap(), reference);
    assert_eq!(fs::read(&state).unwrap(), fs::read(&ref_state).unwrap());

    // Re-running a finished pack changes nothing.
    ok(&mmpipe(&pack_cmd("resume", &manifest, &plan, &state, &out)));
    assert_eq!(fs::read(&out).unwrap(), reference);
}

#[test]
fn resume_needs_matching_state() {
    let dir = TempDir::new().unwrap();
    let manifest = write_records(dir.path(), "m.jsonl", &workload(50));
    let plan = make_plan(dir.path(), &manifest, 2, 1);
    let other = make_plan(dir.path(), &manifest, 2, 2);
    let state = dir.path().join("state.json");
    let out = dir.path().join("packs.jsonl");

    let o = mmpipe(&pack_cmd("resume", &manifest, &plan, &state, &out));
    assert_eq!(o.status.code(), Some(3));

    let mut cmd = pack_cmd("pack", &manifest, &plan, &state, &out);
    cmd.extend(["--max-packs", "1"]);
    ok(&mmpipe(&cmd));
    let o = mmpipe(&pack_cmd("resume", &manifest, &other, &state, &out));
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("fingerprint"));

    let mut changed = pack_cmd("resume", &manifest, &plan, &state, &out);
    changed.extend(["--seq-len", "4096"]);
    assert_eq!(mmpipe(&changed).status.code(), Some(4));
}

#[test]
fn empty_shard_packs_nothing() {
    let dir = TempDir::new().unwrap();
    let manifest = write_records(dir.path(), "m.jsonl", &workload(1));
    let plan = make_plan(dir.path(), &manifest, 2, 0);
    let state = dir.path().join("state.json");
    let out = dir.path().join("packs.jsonl");
    let o = mmpipe(&pack_cmd("pack", &manifest, &plan, &state, &out));
    ok(&o);
    let summary = stdout_json(&o);
    assert_eq!(summary["packs_written"], 0);
    assert_eq!(summary["cursor"], 0);
    assert_eq!(fs::read(&out).unwrap(), b"");
    let saved: Value = serde_json::from_slice(&fs::read(&state).unwrap()).unwrap();
    assert_eq!(saved["ranks"][1]["cursor"], 0);
}

#[test]
fn oversized_sample_strict_and_lenient() {
    let dir = TempDir::new().unwrap();
    let records: Vec<SampleRecord> = [100, 200, 9000, 300]
        .iter()
        .enumerate()
        .map(|(i, &n)| SampleRecord::text_only("d", i as u64, n))
        .collect();
    let manifest = write_records(dir.path(), "m.jsonl", &records);
    let plan = dir.path().join("plan.json");
    ok(&mmpipe(&[
        "plan",
        "--manifest",
        s(&manifest),
        "--dp-ranks",
        "1",
        "--no-shuffle",
        "--out",
        s(&plan),
    ]));
    let state = dir.path().join("state.json");
    let out = dir.path().join("packs.jsonl");
    let mut strict = pack_cmd("pack", &manifest, &plan, &state, &out);
    strict[6] = "0";
    strict.push("--strict");
    let o = mmpipe(&strict);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d#2"), "{}", stderr(&o));

    assert!(!state.exists());
    let mut lenient = pack_cmd("pack", &manifest, &plan, &state, &out);
    lenient[6] = "0";
    let o = mmpipe(&lenient);
    ok(&o);
    let summary = stdout_json(&o);
    assert_eq!(summary["skipped"], serde_json::json!(["d#2"]));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);
}

fn container(entries: &[(&str, Vec<u64>, Vec<f32>)]) -> TensorContainer {
    let mut c = TensorContainer::new();
    for (name, shape, data) in entries {
        c.insert(*name, Tensor::new(shape.clone(), data.clone()).unwrap())
            .unwrap();
    }
    c
}

fn toy_inputs(dir: &Path) -> Vec<PathBuf> {
    (0..3)
        .map(|k| {
            let f = k as f32;
            let c = container(&[
                ("vision.patch", vec![2, 2], vec![f, -f, 0.5 * f, 1.0 + f]),
                ("lang.w", vec![3], vec![0.1 * f, 7.0 - f, f * f]),
                ("lang.b", vec![1], vec![1.0 / (f + 1.0)]),
            ]);
            let path = dir.join(format!("in{k}.mvtc"));
            c.save(&path).unwrap();
            path
        })
        .collect()
}

#[test]
fn merge_uniform_matches_naive_mean() {
    let dir = TempDir::new().unwrap();
    let inputs = toy_inputs(dir.path());
    let out = dir.path().join("out.mvtc");
    let mut args = vec!["merge", "--out", s(&out)];
    args.extend(inputs.iter().map(|p| s(p)));
    ok(&mmpipe(&args));

    let loaded: Vec<TensorContainer> = inputs.iter().map(|p| TensorContainer::load(p).unwrap()).collect();
    let mut expected = TensorContainer::new();
    for (name, t) in loaded[0].iter() {
        let data = (0..t.data.len())
            .map(|j| {
                let sum: f64 = loaded
                    .iter()
                    .map(|c| c.get(name).unwrap().data[j] as f64 / 3.0)
                    .sum();
                sum as f32
            })
            .collect();
        expected
            .insert(name, Tensor::new(t.shape.clone(), data).unwrap())
            .unwrap();
    }
    let oracle = dir.path().join("oracle.mvtc");
    expected.save(&oracle).unwrap();

    let o = mmpipe(&["diff", s(&out), s(&oracle)]);
    ok(&o);
    assert_eq!(stdout_json(&o)["max_abs"], 0.0);
}

#[test]
fn merge_filter_keeps_passthrough_bytes() {
    let dir = TempDir::new().unwrap();
    let inputs = toy_inputs(dir.path());
    let out = dir.path().join("out.mvtc");
    ok(&mmpipe(&[
        "merge",
        "--out",
        s(&out),
        "--filter",
        "lang.",
        "--passthrough",
        "1",
        s(&inputs[0]),
        s(&inputs[1]),
    ]));
    let merged = TensorContainer::load(&out).unwrap();
    let source = TensorContainer::load(&inputs[1]).unwrap();
    let bits = |t: &Tensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(merged.get("vision.patch").unwrap()),
        bits(source.get("vision.patch").unwrap())
    );
    assert_eq!(merged.get("lang.w").unwrap().data, vec![0.05, 6.5, 0.5]);
}

#[test]
fn merge_shape_mismatch_names_tensor() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.mvtc");
    let b = dir.path().join("b.mvtc");
    container(&[("lang.w", vec![2], vec![1.0, 2.0])])
        .save(&a)
        .unwrap();
    container(&[("lang.w", vec![3], vec![1.0, 2.0, 3.0])])
        .save(&b)
        .unwrap();
    let out = dir.path().join("out.mvtc");
    let o = mmpipe(&["merge", "--out", s(&out), s(&a), s(&b)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lang.w"));
    assert!(!out.exists());

    let o = mmpipe(&["merge", "--out", s(&out), "--weights", "0.5,0.6", s(&a), s(&a)]);
    assert_eq!(o.status.code(), Some(2));
}

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn eval_manifest(dir: &Path) -> PathBuf {
    let records = vec![
        SampleRecord {
            dataset_id: "eval".into(),
            sample_index: 0,
            text_tokens: 10,
            images: vec![ImageSpec {
                width: 2000,
                height: 1500,
            }],
        },
        SampleRecord {
            dataset_id: "eval".into(),
            sample_index: 1,
            text_tokens: 10,
            images: vec![ImageSpec {
                width: 40,
                height: 60,
            }],
        },
    ];
    write_records(dir, "eval.jsonl", &records)
}

fn read_report(path: &Path) -> SearchReport {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn search_returns_table_argmax() {
    let dir = TempDir::new().unwrap();
    let manifest = eval_manifest(dir.path());
    let mins = [4u64, 16, 32, 64];
    let maxs = [1280u64, 2048, 2560, 3072, 4096, 8192];
    let mut table = String::new();
    let mut best = (0, 0, f64::MIN);
    for (i, &mx) in maxs.iter().enumerate() {
        for (j, &mn) in mins.iter().enumerate() {
            let score = ((i * 7 + j * 13) % 23) as f64 / 10.0;
            table.push_str(&format!("{} {} {score}\n", mn * 784, mx * 784));
            if score > best.2 {
                best = (mn * 784, mx * 784, score);
            }
        }
    }
    let table_path = dir.path().join("table.txt");
    fs::write(&table_path, table).unwrap();
    let scorer = script(
        dir.path(),
        "score.sh",
        "awk -v a=\"$2\" -v b=\"$3\" '$1 == a && $2 == b { print $3 }' \"$1\"",
    );
    let report = dir.path().join("report.json");
    let o = mmpipe(&[
        "search",
        "--manifest",
        s(&manifest),
        "--scorer",
        s(&scorer),
        "--scorer-arg",
        s(&table_path),
        "--out",
        s(&report),
    ]);
    ok(&o);
    let r = read_report(&report);
    assert_eq!((r.best.min_pixels, r.best.max_pixels, r.best.score), best);
    assert_eq!(r.surface.len(), 24);
    assert_eq!(r.box_plot.len(), 6);
}

#[test]
fn search_records_failing_config_as_hole() {
    let dir = TempDir::new().unwrap();
    let manifest = eval_manifest(dir.path());
    let scorer = script(
        dir.path(),
        "score.sh",
        &format!(
            "if [ \"$1\" = {} ] && [ \"$2\" = {} ]; then echo boom >&2; exit 1; fi\n\
             test -s \"$3\" || exit 1\n\
             echo \"$2\"",
            16 * 784,
            2048 * 784
        ),
    );
    let report = dir.path().join("report.json");
    let o = mmpipe(&[
        "search",
        "--manifest",
        s(&manifest),
        "--scorer",
        s(&scorer),
        "--out",
        s(&report),
    ]);
    ok(&o);
    let r = read_report(&report);
    assert_eq!(r.surface.len(), 23);
    assert_eq!(r.holes.len(), 1);
    assert_eq!(
        (r.holes[0].min_pixels, r.holes[0].max_pixels),
        (16 * 784, 2048 * 784)
    );
    // Score grows with max_pixels; ties go to the larger min.
    assert_eq!((r.best.min_pixels, r.best.max_pixels), (64 * 784, 8192 * 784));
}

#[test]
fn search_defaults_and_custom_grid() {
    let dir = TempDir::new().unwrap();
    let manifest = eval_manifest(dir.path());
    let scorer = script(dir.path(), "score.sh", "echo 1");
    let report = dir.path().join("report.json");
    let o = mmpipe(&[
        "search",
        "--manifest",
        s(&manifest),
        "--scorer",
        s(&scorer),
        "--out",
        s(&report),
    ]);
    ok(&o);
    assert_eq!(stdout_json(&o)["configs"], 24);
    let r = read_report(&report);
    assert_eq!(r.surface.len(), 24);
    // All tied: cheapest inference wins.
    assert_eq!((r.best.min_pixels, r.best.max_pixels), (64 * 784, 1280 * 784));

    let o = mmpipe(&[
        "search",
        "--manifest",
        s(&manifest),
        "--scorer",
        s(&scorer),
        "--min-values",
        "4*28*28",
        "--max-values",
        "1280*28*28,2048*28*28",
        "--out",
        s(&report),
    ]);
    ok(&o);
    assert_eq!(read_report(&report).surface.len(), 2);

    let bad = mmpipe(&[
        "search",
        "--manifest",
        s(&manifest),
        "--scorer",
        s(&scorer),
        "--min-values",
        "9000*784",
        "--out",
        s(&report),
    ]);
    assert_eq!(bad.status.code(), Some(2));

    let failing = script(dir.path(), "fail.sh", "exit 3");
    let o = mmpipe(&[
        "search",
        "--manifest",
        s(&manifest),
        "--scorer",
        s(&failing),
        "--out",
        s(&report),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_reports_both_packers() {
    let dir = TempDir::new().unwrap();
    let manifest = write_records(dir.path(), "m.jsonl", &workload(300));
    let o = mmpipe(&["stats", "--manifest", s(&manifest)]);
    ok(&o);
    let v = stdout_json(&o);
    let lower = v["lower_bound"].as_u64().unwrap();
    for mode in ["online", "offline"] {
        assert!(v[mode]["pack_count"].as_u64().unwrap() >= lower);
        assert_eq!(v[mode]["samples"], 300);
        assert_eq!(v[mode]["visual_histogram"].as_array().unwrap().len(), 5);
    }

    let plan = make_plan(dir.path(), &manifest, 1, 3);
    let state = dir.path().join("state.json");
    let out = dir.path().join("packs.jsonl");
    let mut cmd = pack_cmd("pack", &manifest, &plan, &state, &out);
    cmd[6] = "0";
    ok(&mmpipe(&cmd));
    let o = mmpipe(&["stats", "--packs", s(&out), "--edges", "100,1000"]);
    ok(&o);
    let v = stdout_json(&o);
    assert_eq!(v["packs"]["samples"], 300);
    assert_eq!(v["packs"]["visual_histogram"].as_array().unwrap().len(), 3);
}
