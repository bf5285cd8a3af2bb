use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
[model]
kind = "unicycle"
horizon_s = 3.0
intervals = 10

[solver]
max_iterations = 30

[simulation]
steps = 4
runs = 2
seed = 5
x_hat0 = [2.0, 1.0, 3.141592653589793]
p_hat0_diag = [0.01, 0.01, 0.0025]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualsmpc"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("experiment.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> i32 {
    bin().args(args).status().unwrap().code().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn solve_writes_report_and_stage_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let code = run(&["solve", "--config", cfg.to_str().unwrap(), "--controller", "open_loop", "--out", out.to_str().unwrap()]);
    assert!(code == 0 || code == 3, "exit {code}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("solve_open_loop.json")).unwrap()).unwrap();
    for k in json["gains"].as_array().unwrap() {
        for row in k.as_array().unwrap() {
            assert!(row.as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
        }
    }
    let o = &json["objective"];
    let parts: f64 = ["nominal_cost", "variance_cost", "penalty", "regularization"]
        .iter()
        .map(|k| o[k].as_f64().unwrap())
        .sum();
    assert!((parts - o["total"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(json["controls"].as_array().unwrap().len(), 10);

    let table = read_csv(&out.join("solve_open_loop_stages.csv"));
    assert_eq!(table[0][..4], ["k", "xbar_rx", "xbar_ry", "xbar_theta"]);
    assert_eq!(table.len(), 12);
    assert!(table.iter().all(|r| r.len() == table[0].len()));
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}"));
        let o = out.to_str().unwrap();
        run(&["solve", "--config", cfg.to_str().unwrap(), "--controller", "all", "--out", o]);
        assert_eq!(
            run(&["simulate", "--config", cfg.to_str().unwrap(), "--controller", "nominal", "--runs", "1", "--seed", "0", "--out", o]),
            0
        );
        outputs.push(out);
    }
    let mut files: Vec<_> = walk(&outputs[0]);
    files.sort();
    assert!(files.len() >= 8);
    for f in files {
        let rel = f.strip_prefix(&outputs[0]).unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(outputs[1].join(rel)).unwrap(), "{}", rel.display());
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn summary_matches_recount_from_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let code = run(&["simulate", "--config", cfg.to_str().unwrap(), "--controller", "all", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 3);
    for name in ["nominal", "open_loop", "output_feedback"] {
        let mut flagged = 0usize;
        let mut rows = 0usize;
        let mut trace = 0.0;
        for run in 0..2 {
            let table = read_csv(&out.join(name).join(format!("run_{run:03}.csv")));
            let header = &table[0];
            assert_eq!(header[..4], ["step", "rx", "ry", "theta"]);
            let flag = header.iter().position(|h| h == "violation_flag").unwrap();
            let tr = header.iter().position(|h| h == "tr_Phat").unwrap();
            for r in &table[1..] {
                rows += 1;
                flagged += (r[flag] == "1") as usize;
                trace += r[tr].parse::<f64>().unwrap();
            }
        }
        let s = &summary[name];
        assert_eq!(s["step_count"].as_u64().unwrap() as usize, rows);
        assert_eq!(s["violation_count"].as_u64().unwrap() as usize, flagged);
        assert!((s["violation_frequency"].as_f64().unwrap() - flagged as f64 / rows as f64).abs() < 1e-15);
        assert!((s["mean_trace_p_hat"].as_f64().unwrap() - trace / rows as f64).abs() < 1e-12);
    }
}

#[test]
fn phi_table_has_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["phi-table", "--mu-range", "-2,2,21", "--sigma-list", "0,0.5,1", "--out", out]), 0);
    let table = read_csv(&dir.path().join("phi_table.csv"));
    assert_eq!(table[0], ["sigma", "mu", "phi"]);
    let rows: Vec<[f64; 3]> = table[1..]
        .iter()
        .map(|r| [r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap()])
        .collect();
    assert_eq!(rows.len(), 63);
    for r in &rows {
        if r[0] == 0.0 {
            assert_eq!(r[2], r[1].max(0.0));
        }
        if r[1] == 0.0 {
            assert!((r[2] - r[0] / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        }
    }
    for series in rows.chunks(21) {
        assert!(series.windows(2).all(|w| w[1][2] >= w[0][2]));
    }
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nintervals = 10\nhorizon = 3\n");
    let output = bin().args(["solve", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("line 3") && err.contains("horizon"), "{err}");
    let out = dir.path().join("o");
    assert_eq!(run(&["solve", "--controller", "robust", "--out", out.to_str().unwrap()]), 2);
    assert_eq!(run(&["phi-table", "--mu-range", "3,1,4", "--out", out.to_str().unwrap()]), 2);
}
