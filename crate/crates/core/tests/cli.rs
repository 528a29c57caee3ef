use std::path::Path;
use std::process::{Command, Output};

use soyo_core::io::{write_feat, FeatFile};
use soyo_core::rng::RngStream;
use soyo_core::types::FeatureMatrix;

fn soyo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soyo")).args(args).env_remove("SOYO_SEED").output().expect("spawn soyo")
}

fn ok(args: &[&str]) -> String {
    let out = soyo(args);
    assert!(out.status.success(), "soyo {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_and_run_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let stream = tmp.path().join(format!("s{i}"));
        let run = tmp.path().join(format!("r{i}"));
        let gen_args = ["--quiet", "--seed", "11", "--out", s(&stream), "gen", "--domains", "3", "--dim", "8"];
        ok(&gen_args);
        ok(&["--quiet", "--seed", "11", "--threads", threads, "--out", s(&run), "run", "--stream", s(&stream)]);
        outputs.push((read_dir_sorted(&stream), read_dir_sorted(&run)));
    }
    assert_eq!(outputs[0], outputs[1]);
    let names: Vec<_> = outputs[0].1.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["confusion.csv", "model.store", "run.json", "sessions.csv"]);
}

#[test]
fn seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[
        "--quiet",
        "--seed",
        "5",
        "--out",
        s(&a),
        "gen",
        "--domains",
        "2",
        "--dim",
        "4",
        "--n-train",
        "20",
        "--n-test",
        "5",
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_soyo"))
        .args(["--quiet", "--out", s(&b), "gen", "--domains", "2", "--dim", "4", "--n-train", "20", "--n-test", "5"])
        .env("SOYO_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
}

#[test]
fn inspect_counts_gmc_store() {
    let tmp = tempfile::tempdir().unwrap();
    let stream = tmp.path().join("s");
    let fit = tmp.path().join("f");
    ok(&["--quiet", "--out", s(&stream), "gen", "--domains", "3", "--dim", "32", "--n-train", "120", "--n-test", "10"]);
    ok(&["--quiet", "--out", s(&fit), "fit-gmc", "--stream", s(&stream), "--k", "2", "--cov", "diag"]);
    let text = ok(&["--out", s(&fit), "inspect", "--store", s(&fit.join("model.store"))]);
    assert!(text.contains("compressor params: 774"), "{text}");
    assert!(text.contains("extra params: 774"), "{text}");
}

#[test]
fn bic_sweep_finds_three_clusters() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(21, 0).generator();
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let rows: Vec<[f64; 2]> = (0..900)
        .map(|i| {
            let c = centers[i % 3];
            [c[0] + rng.normal(), c[1] + rng.normal()]
        })
        .collect();
    let input = tmp.path().join("x.feat");
    write_feat(&input, &FeatFile::new(FeatureMatrix::from_rows(&rows).unwrap())).unwrap();
    let out = tmp.path().join("b");
    let table = ok(&["--out", s(&out), "bic-sweep", "--input", s(&input), "--k-max", "6"]);
    let best: Vec<&str> = table.lines().filter(|l| l.contains("<- min")).collect();
    assert_eq!(best.len(), 1);
    assert_eq!(best[0].split_whitespace().next(), Some("3"), "{table}");
    let csv = std::fs::read_to_string(out.join("bic.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(std::fs::read_to_string(out.join("bic-sweep.json")).unwrap().contains("config_hash"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(soyo(&["--help"]).status.code(), Some(0));
    assert_eq!(soyo(&["--version"]).status.code(), Some(0));
    let usage = soyo(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));
    assert_eq!(soyo(&["gen", "--bogus"]).status.code(), Some(1));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[stream]\nunknown_key = 1\n").unwrap();
    assert_eq!(soyo(&["--config", s(&cfg), "gen"]).status.code(), Some(1));

    let garbage = tmp.path().join("g.feat");
    let mut bytes = b"FEAT\x02\x00".to_vec();
    bytes.resize(40, 0);
    std::fs::write(&garbage, bytes).unwrap();
    let out = soyo(&["--out", s(&tmp.path().join("o")), "bic-sweep", "--input", s(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported version"));

    let store = tmp.path().join("bad.store");
    std::fs::write(&store, "not a store\n").unwrap();
    assert_eq!(soyo(&["inspect", "--store", s(&store)]).status.code(), Some(2));
}

#[test]
fn fit_resample_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let stream = tmp.path().join("s");
    let train = tmp.path().join("t");
    ok(&[
        "--quiet",
        "--seed",
        "2",
        "--out",
        s(&stream),
        "gen",
        "--domains",
        "2",
        "--dim",
        "6",
        "--n-train",
        "150",
        "--n-test",
        "40",
    ]);
    ok(&["--quiet", "--seed", "2", "--out", s(&train), "train", "--stream", s(&stream), "--compressor", "meanstd"]);
    assert!(train.join("train.csv").exists());

    let pred = tmp.path().join("p");
    ok(&["--quiet", "--out", s(&pred), "predict", "--store", s(&train.join("model.store")), "--stream", s(&stream)]);
    let csv = std::fs::read_to_string(pred.join("predictions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("domain,row,predicted"));
    assert_eq!(lines.count(), 80);

    let res = tmp.path().join("r");
    ok(&[
        "--quiet",
        "--out",
        s(&res),
        "resample",
        "--store",
        s(&train.join("model.store")),
        "--domain",
        "2",
        "--n",
        "33",
    ]);
    let f = soyo_core::io::read_feat(&res.join("resampled.feat")).unwrap();
    assert_eq!((f.features.n_rows(), f.features.dim()), (33, 6));

    let missing = soyo(&["--out", s(&res), "resample", "--store", s(&train.join("model.store")), "--domain", "9"]);
    assert_eq!(missing.status.code(), Some(1));
}
