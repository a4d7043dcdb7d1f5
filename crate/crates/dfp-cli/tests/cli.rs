//! End-to-end checks of the binary: output formats are pinned (golden
//! headers and field names), exit codes follow the usage/computation
//! split, and the record cache behaves.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

struct Sandbox {
    dir: PathBuf,
}

impl Sandbox {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("dfp-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Sandbox { dir }
    }

    fn write(&self, name: &str, content: &str) -> PathBuf {
        let p = self.dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> (String, String, i32) {
        let out = Command::new(env!("CARGO_BIN_EXE_dfp"))
            .args(args)
            .current_dir(&self.dir)
            .output()
            .expect("dfp runs");
        (
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
            out.status.code().unwrap_or(-1),
        )
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}

#[test]
fn exit_codes() {
    let sb = Sandbox::new("exit");
    // Unknown subcommand: usage error.
    let (_, _, code) = sb.run(&["frobnicate"]);
    assert_eq!(code, 1);
    // Help exits cleanly.
    let (out, _, code) = sb.run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("describe"));
    // Spec validation failure: computation error with a field path.
    sb.write("bad.json", r#"{"family":"chain","widths":[2,0]}"#);
    let (_, err, code) = sb.run(&["describe", "bad.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("layers[0]"), "{err}");
    // Success.
    sb.write("ok.json", r#"{"family":"chain","widths":[2,3]}"#);
    let (_, _, code) = sb.run(&["describe", "ok.json"]);
    assert_eq!(code, 0);
}

#[test]
fn describe_is_canonical_fixed_point() {
    let sb = Sandbox::new("describe");
    sb.write("s.json", r#"{"family":"densenet","widths":[3,3,3]}"#);
    let (out, _, code) = sb.run(&["describe", "s.json"]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(first_line(&out)).unwrap();
    assert_eq!(doc["family"], "dense");
    assert_eq!(doc["param_count"], 27);
    // Feeding the canonical spec back yields the same canonical spec.
    sb.write("canon.json", &doc["spec"].to_string());
    let (out2, _, code) = sb.run(&["describe", "canon.json"]);
    assert_eq!(code, 0);
    let doc2: serde_json::Value = serde_json::from_str(first_line(&out2)).unwrap();
    assert_eq!(doc["spec"], doc2["spec"]);
}

#[test]
fn potential_report_field_names() {
    let sb = Sandbox::new("potential");
    sb.write("s.json", r#"{"family":"chain","widths":[2,3,2]}"#);
    let (out, _, code) = sb.run(&["potential", "s.json", "--seed", "7"]);
    assert_eq!(code, 0);
    let line = first_line(&out);
    // Exact field names and order are part of the interface.
    let keys = [
        "frame_potential",
        "coherence",
        "one_sided_coherence",
        "grad_norm",
        "n_offdiag",
        "atom_count",
    ];
    let mut at = 0;
    for key in keys {
        let pos = line.find(&format!("\"{key}\":")).unwrap_or_else(|| panic!("{key} missing"));
        assert!(pos >= at, "{key} out of order");
        at = pos;
    }
    let doc: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(doc["n_offdiag"], 20);
    assert_eq!(doc["atom_count"], 5);
}

#[test]
fn rank_csv_golden_header_and_sorting() {
    let sb = Sandbox::new("rank");
    fs::create_dir_all(sb.dir.join("specs")).unwrap();
    sb.write("specs/chain.json", r#"{"family":"chain","widths":[3,3,3]}"#);
    sb.write("specs/dense.json", r#"{"family":"dense","widths":[3,3,3]}"#);
    let (out, _, code) = sb.run(&[
        "rank",
        "specs",
        "--max-iters",
        "2000",
        "--no-cache",
        "--out",
        "ranking.csv",
    ]);
    assert_eq!(code, 0, "{out}");
    let csv = fs::read_to_string(sb.dir.join("ranking.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,params,potential,bound,seconds"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    // dense (3,3) is square and orthogonalizable; it must rank first.
    assert!(rows[0].starts_with("dense,"), "{csv}");
    // Chain rows carry a bound value; dense rows leave it empty.
    let chain_row = rows.iter().find(|r| r.starts_with("chain,")).unwrap();
    let fields: Vec<&str> = chain_row.split(',').collect();
    assert!(!fields[3].is_empty(), "chain bound missing: {chain_row}");
    let dense_row = rows.iter().find(|r| r.starts_with("dense,")).unwrap();
    assert_eq!(dense_row.split(',').nth(3), Some(""));
}

#[test]
fn rank_reads_json_lines() {
    let sb = Sandbox::new("jsonl");
    sb.write(
        "batch.jsonl",
        concat!(
            r#"{"family":"chain","widths":[2,3]}"#,
            "\n",
            r#"{"family":"chain","widths":[3,4]}"#,
            "\n"
        ),
    );
    let (out, _, code) = sb.run(&[
        "rank",
        "batch.jsonl",
        "--max-iters",
        "1500",
        "--no-cache",
        "--format",
        "json",
    ]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(first_line(&out)).unwrap();
    let rows = doc.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().any(|r| r["id"] == "batch:1"));
}

#[test]
fn sweep_grid_goldens() {
    let sb = Sandbox::new("sweep");
    let (_, _, code) = sb.run(&[
        "sweep",
        "--family",
        "chain,resnet",
        "--depths",
        "1..2",
        "--widths",
        "2,3",
        "--max-iters",
        "800",
        "--restarts",
        "1",
        "--no-cache",
        "--out",
        "curves.csv",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(sb.dir.join("curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("family,depth,width,params,n_offdiag,potential,bound,seconds,status")
    );
    let rows: Vec<&str> = lines.collect();
    // 2 families x 2 depths x 2 widths.
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.ends_with(",ok")), "{csv}");
    // Grid order is family-major, then depth, then width.
    assert!(rows[0].starts_with("chain,1,2,"));
    assert!(rows[7].starts_with("residual,2,3,"));
}

#[test]
fn cache_hit_miss_and_no_cache() {
    let sb = Sandbox::new("cache");
    sb.write("s.json", r#"{"family":"chain","widths":[2,3]}"#);
    let args = ["minimize", "s.json", "--max-iters", "1000", "--cache-dir", "runs"];
    let (out1, _, _) = sb.run(&args);
    assert!(out1.contains("\"cached\":false"));
    let (out2, _, _) = sb.run(&args);
    assert!(out2.contains("\"cached\":true"));

    // Editing the spec invalidates the cache.
    sb.write("s.json", r#"{"family":"chain","widths":[2,4]}"#);
    let (out3, _, _) = sb.run(&args);
    assert!(out3.contains("\"cached\":false"));

    // Changing the config invalidates the cache.
    let (out4, _, _) = sb.run(&[
        "minimize", "s.json", "--max-iters", "1001", "--cache-dir", "runs",
    ]);
    assert!(out4.contains("\"cached\":false"));

    // --no-cache never reads nor writes.
    let pre = fs::read_to_string(sb.dir.join("runs/records.jsonl")).unwrap();
    let (out5, _, _) = sb.run(&[
        "minimize", "s.json", "--max-iters", "1000", "--no-cache",
    ]);
    assert!(out5.contains("\"cached\":false"));
    let post = fs::read_to_string(sb.dir.join("runs/records.jsonl")).unwrap();
    assert_eq!(pre, post);

    // Corrupt lines are skipped with a warning, and the valid tail still hits.
    let mut broken = String::from("{oops\n");
    broken.push_str(&post);
    fs::write(sb.dir.join("runs/records.jsonl"), broken).unwrap();
    let (out6, err6, _) = sb.run(&args);
    assert!(out6.contains("\"cached\":true"), "{out6}");
    assert!(err6.contains("corrupt"), "{err6}");
}

#[test]
fn gram_csv_shape_and_magnitudes() {
    let sb = Sandbox::new("gram");
    sb.write("s.json", r#"{"family":"chain","widths":[2,3,2]}"#);
    let (_, _, code) = sb.run(&[
        "gram", "s.json", "--seed", "3", "--out", "g.csv", "--mag-out", "m.csv",
    ]);
    assert_eq!(code, 0);
    let g = fs::read_to_string(sb.dir.join("g.csv")).unwrap();
    let rows: Vec<&str> = g.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
    // Unit diagonal.
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.split(',').nth(i), Some("1"));
    }
    let m = fs::read_to_string(sb.dir.join("m.csv")).unwrap();
    for (gr, mr) in g.lines().zip(m.lines()) {
        for (gv, mv) in gr.split(',').zip(mr.split(',')) {
            let gv: f64 = gv.parse().unwrap();
            let mv: f64 = mv.parse().unwrap();
            assert!((gv.abs() - mv).abs() <= 1e-12);
        }
    }
}

#[test]
fn minimize_dict_out_round_trips() {
    let sb = Sandbox::new("dictout");
    sb.write("s.json", r#"{"family":"resnet","widths":[3,3,3,3]}"#);
    let (out, _, code) = sb.run(&[
        "minimize", "s.json", "--max-iters", "4000", "--no-cache", "--dict-out", "best.json",
    ]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(first_line(&out)).unwrap();
    let best = doc["best_potential"].as_f64().unwrap();
    // Evaluating the saved dictionary reproduces the minimized value.
    let (rep, _, code) = sb.run(&["potential", "s.json", "--dict", "best.json"]);
    assert_eq!(code, 0);
    let rep: serde_json::Value = serde_json::from_str(first_line(&rep)).unwrap();
    let f2 = rep["frame_potential"].as_f64().unwrap();
    assert!((f2 - best).abs() <= 1e-12, "{f2} vs {best}");
    assert!(sb.dir.join("best.params").exists());
}

#[test]
fn bound_requires_chain() {
    let sb = Sandbox::new("bound");
    sb.write("d.json", r#"{"family":"dense","widths":[3,3,3]}"#);
    let (_, err, code) = sb.run(&["bound", "d.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("chain"), "{err}");

    sb.write("c.json", r#"{"family":"chain","widths":[2,3]}"#);
    let (out, _, code) = sb.run(&["bound", "c.json"]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(first_line(&out)).unwrap();
    assert!((doc["bound"].as_f64().unwrap() - 0.25).abs() <= 1e-12);
    assert!(doc["c_star"].is_array());
    assert!(doc["iterations"].is_number());
}

#[test]
fn sparse_check_passes_on_small_specs() {
    let sb = Sandbox::new("sparse");
    sb.write("s.json", r#"{"family":"chain","widths":[4,3],"lambda":0.2}"#);
    let (out, _, code) = sb.run(&["sparse-check", "s.json", "--trials", "10"]);
    assert_eq!(code, 0, "{out}");
    let doc: serde_json::Value = serde_json::from_str(first_line(&out)).unwrap();
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["monotone"]["violations"], 0);
    assert_eq!(doc["orthonormal_closed_form"]["pass"], true);

    // Deep specs skip the closed-form check but still run the rest.
    sb.write("deep.json", r#"{"family":"resnet","widths":[3,3,3,3]}"#);
    let (out, _, code) = sb.run(&["sparse-check", "deep.json", "--trials", "5"]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(first_line(&out)).unwrap();
    assert_eq!(doc["pass"], true);
    assert!(doc["orthonormal_closed_form"]["skipped"].is_string());
}

#[test]
fn jobs_flag_keeps_output_deterministic() {
    let sb = Sandbox::new("jobs");
    fs::create_dir_all(sb.dir.join("specs")).unwrap();
    for (i, w) in [[2usize, 3], [3, 4], [2, 4], [4, 5]].iter().enumerate() {
        sb.write(
            &format!("specs/s{i}.json"),
            &format!(r#"{{"family":"chain","widths":[{},{}]}}"#, w[0], w[1]),
        );
    }
    // Wall-clock seconds vary run to run; everything else must not.
    let run = |jobs: &str| -> Vec<String> {
        let (out, _, code) = sb.run(&[
            "rank", "specs", "--max-iters", "1500", "--no-cache", "--jobs", jobs,
        ]);
        assert_eq!(code, 0);
        out.lines()
            .map(|l| {
                let fields: Vec<&str> = l.split(',').collect();
                fields[..fields.len().saturating_sub(1)].join(",")
            })
            .collect()
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn gram_cap_is_enforced() {
    // A spec whose dense Gram would exceed the cap must fail cleanly.
    let sb = Sandbox::new("cap");
    sb.write("big.json", r#"{"family":"chain","widths":[2000,2000,2000]}"#);
    let (_, err, code) = sb.run(&["gram", "big.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("cap"), "{err}");
}

