use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use weightscope::fixtures::{write_planted_suite, PlantedSuite};
use weightscope::tensor_io::{write_archive, MatrixData, WeightMatrix};

fn weightscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weightscope"))
        .args(args)
        .env("WEIGHTSCOPE_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn suite(dir: &Path, runs: usize) -> PlantedSuite {
    write_planted_suite(dir.join("fx"), runs, 11).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sparsity_reports_planted_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 1);
    let v = json(&weightscope(&[
        "sparsity",
        "--base",
        s(&fx.base),
        "--finetuned",
        s(&fx.runs[0]),
    ]));
    assert_eq!(v["sparsity_bf16"], 0.75);
    assert_eq!(v["layers"].as_array().unwrap().len(), 4);
    // the layernorm is outside the default filter but counted in all_tensors
    assert_eq!(v["all_tensors"]["layers"], 5);
}

#[test]
fn missing_checkpoint_is_io_error() {
    let out = weightscope(&[
        "sparsity",
        "--base",
        "/nonexistent.wsa",
        "--finetuned",
        "/nonexistent2.wsa",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn bad_eta_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 1);
    let out = weightscope(&[
        "sparsity",
        "--base",
        s(&fx.base),
        "--finetuned",
        s(&fx.runs[0]),
        "--eta",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn jaccard_consensus_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 3);
    let out_dir = dir.path().join("out");
    let mut common = vec!["--base", s(&fx.base), "--finetuned"];
    common.extend(fx.runs.iter().map(|p| s(p)));
    common.extend(["--out-dir", s(&out_dir)]);

    let v = json(&weightscope(&[&["jaccard"], &common[..]].concat()));
    assert!(v["mean_off_diagonal"].as_f64().unwrap() > v["mean_baseline"].as_f64().unwrap());
    assert!(out_dir.join("jaccard.csv").is_file());

    let v = json(&weightscope(
        &[&["consensus", "--grid", "16"], &common[..]].concat(),
    ));
    let layers = v["layers"].as_array().unwrap();
    for (l, planted) in layers.iter().zip(&fx.layers) {
        let rows: Vec<usize> = serde_json::from_value(l["unanimous_rows"].clone()).unwrap();
        assert_eq!(rows, planted.stripe_rows);
        assert!(out_dir.join(l["csv"].as_str().unwrap()).is_file());
    }

    let v = json(&weightscope(
        &[&["profiles", "--window", "3"], &common[..]].concat(),
    ));
    assert_eq!(v["layers"].as_array().unwrap().len(), 3 * 4);
    // stripe rows are fully updated in every run
    assert_eq!(v["layers"][0]["max_row_ratio"], 1.0);
}

#[test]
fn jaccard_needs_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 1);
    let out_dir = dir.path().join("out");
    let out = weightscope(&[
        "jaccard",
        "--base",
        s(&fx.base),
        "--finetuned",
        s(&fx.runs[0]),
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectral_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 1);
    let out_dir = dir.path().join("out");
    let args = [
        "--base",
        s(&fx.base),
        "--finetuned",
        s(&fx.runs[0]),
        "--out-dir",
        s(&out_dir),
        "--k",
        "4",
        "--k",
        "8",
    ];
    let v = json(&weightscope(&[&["spectral"], &args[..]].concat()));
    let runs = v["spectral"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[1]["layers"].as_array().unwrap().len(), 4);
    assert!(out_dir.join(runs[0]["csv"].as_str().unwrap()).is_file());

    let out = weightscope(&[&["bounds"], &args[..]].concat());
    let v = json(&out);
    assert_eq!(v["bounds"]["runs"][0]["violations"], 0);
}

#[test]
fn export_masks_then_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 1);
    let masks = dir.path().join("masks");
    let v = json(&weightscope(&[
        "export-masks",
        "--checkpoint",
        s(&fx.base),
        "--out-dir",
        s(&masks),
        "--k",
        "8",
        "--seed",
        "3",
    ]));
    let archives = v["archives"].as_array().unwrap();
    assert_eq!(archives.len(), 4);
    assert_eq!(
        archives[2]["manifest"]["total_count"],
        archives[3]["manifest"]["total_count"]
    );

    let v = json(&weightscope(&[
        "overlap",
        "--base",
        s(&fx.base),
        "--finetuned",
        s(&fx.runs[0]),
        "--masks",
        s(&masks.join("low_magnitude")),
    ]));
    let ratio = v["runs"][0]["ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ratio));
    assert_eq!(v["runs"][0]["random_baseline"], 0.5);

    let v = json(&weightscope(&[
        "principal-mask",
        "--checkpoint",
        s(&fx.base),
        "--out-dir",
        s(&dir.path().join("pm")),
        "--k",
        "4",
        "--alpha",
        "0.25",
    ]));
    assert_eq!(v["archives"][0]["manifest"]["density"], 0.25);
}

#[test]
fn mask_writes_update_masks() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 1);
    let out_dir = dir.path().join("m");
    let v = json(&weightscope(&[
        "mask",
        "--base",
        s(&fx.base),
        "--finetuned",
        s(&fx.runs[0]),
        "--out-dir",
        s(&out_dir),
    ]));
    for row in v.as_array().unwrap() {
        assert_eq!(row["density"], 0.25);
        assert!(Path::new(row["file"].as_str().unwrap()).is_file());
    }
}

#[test]
fn pipeline_from_config_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let fx = suite(dir.path(), 2);
    let cfg = dir.path().join("weightscope.toml");
    std::fs::write(
        &cfg,
        format!(
            "base = {:?}\nfinetuned = [{:?}, {:?}]\noutput_dir = \"report\"\nseed = 5\n\n[spectral]\nk = [8]\n\n[[masks.recipes]]\nkind = \"low_magnitude\"\nalpha = 0.3\n",
            fx.base, fx.runs[0], fx.runs[1]
        ),
    )
    .unwrap();
    let v = json(&weightscope(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--seed",
        "9",
    ]));
    assert_eq!(v["schema"], "weightscope-report/1");
    assert_eq!(v["seed"], 9);
    assert_eq!(v["masks"]["recipes"][0]["label"], "low_magnitude");
    // relative output dir resolves against the config file
    let report = dir.path().join("report/report.json");
    let on_disk: Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert_eq!(on_disk, v);
}

#[test]
fn pipeline_config_errors_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "base = \"missing.wsa\"\nfinetuned = []\noutput_dir = \"o\"\n[analytics]\nwindow = 2\n",
    )
    .unwrap();
    let out = weightscope(&["pipeline", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3 configuration problem(s)"), "{err}");

    std::fs::write(
        &cfg,
        "base = \"a\"\nfinetuned = []\noutput_dir = \"o\"\ntypo = 1\n",
    )
    .unwrap();
    assert_eq!(
        weightscope(&["pipeline", "--config", s(&cfg)])
            .status
            .code(),
        Some(2)
    );
}

fn attention_checkpoint(path: &Path) {
    // d_model 16, head_dim 4, 4 query heads, 2 kv heads; stored out x in
    let mut rng = 1u64;
    let mut next = || {
        rng = rng
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((rng >> 40) as f32 / (1u64 << 24) as f32) - 0.5
    };
    let mut mats = Vec::new();
    for (proj, rows, cols) in [
        ("q_proj", 16, 16),
        ("k_proj", 8, 16),
        ("v_proj", 8, 16),
        ("o_proj", 16, 16),
    ] {
        let data = (0..rows * cols).map(|_| next()).collect();
        mats.push(
            WeightMatrix::new(
                format!("model.layers.0.self_attn.{proj}.weight"),
                rows,
                cols,
                MatrixData::F32(data),
            )
            .unwrap(),
        );
    }
    let tensors: Vec<_> = mats.iter().map(|m| (m, false)).collect();
    write_archive(path, &tensors, &BTreeMap::new()).unwrap();
}

#[test]
fn intervene_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("a.wsa"), dir.path().join("b.wsa"));
    attention_checkpoint(&src);
    let layout = [
        "--layers",
        "0",
        "--head-dim",
        "4",
        "--q-heads",
        "4",
        "--kv-heads",
        "2",
    ];
    let v = json(&weightscope(
        &[
            &[
                "intervene",
                "--input",
                s(&src),
                "--output",
                s(&dst),
                "--kind",
                "rotate-permute",
                "--seed",
                "4",
            ],
            &layout[..],
        ]
        .concat(),
    ));
    assert_eq!(v["layers"][0]["exact_check"]["passed"], true);
    assert!(
        v["layers"][0]["exact_check"]["weight_deviation"]["v"]
            .as_f64()
            .unwrap()
            > 0.1
    );
    assert!(dir.path().join("b.wsa.provenance.json").is_file());

    let verify = |tol: &str| {
        weightscope(
            &[
                &[
                    "verify-invariance",
                    "--original",
                    s(&src),
                    "--edited",
                    s(&dst),
                    "--tol",
                    tol,
                ][..],
                &layout[..],
            ]
            .concat(),
        )
    };
    // f32 storage rounds the edit, so only a float-level tolerance holds
    let v = json(&verify("1e-5"));
    assert_eq!(v["passed"], true);
    assert_eq!(verify("1e-14").status.code(), Some(1));
}

#[test]
fn verify_detects_unrelated_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.wsa"), dir.path().join("b.wsa"));
    attention_checkpoint(&a);
    // edit with the true layout, then check under a wrong one: the 4-wide
    // rotation blocks straddle the assumed 8-wide heads
    let out = weightscope(&[
        "intervene",
        "--input",
        s(&a),
        "--output",
        s(&b),
        "--layers",
        "0",
        "--head-dim",
        "4",
        "--q-heads",
        "4",
        "--kv-heads",
        "2",
    ]);
    assert!(out.status.success());
    let out = weightscope(&[
        "verify-invariance",
        "--original",
        s(&a),
        "--edited",
        s(&b),
        "--layers",
        "0",
        "--head-dim",
        "8",
        "--q-heads",
        "2",
        "--kv-heads",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn theory_check_passes() {
    let v = json(&weightscope(&[
        "theory-check",
        "--trials",
        "20",
        "--seed",
        "1",
    ]));
    assert_eq!(v["passed"], true);
    assert_eq!(v["quadratic_kl"]["trials"], 20);
}
