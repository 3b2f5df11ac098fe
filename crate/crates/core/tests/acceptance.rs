//! End-to-end acceptance run through the `increvec` binary. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_increvec");
const SEEDS: [u64; 3] = [1, 2, 3];

/// Desk-scale dimensions shared by warm-up and every run.
const DESK_CONFIG: &str = r#"{
  "model_dim": 32,
  "encoder": {"num_layers": 1, "num_heads": 4, "ff_dim": 64},
  "upper": {"num_layers": 1, "num_heads": 4, "ff_dim": 64},
  "max_seq_len": 16,
  "lr": 3e-3,
  "n0": 5,
  "t0": 10,
  "alpha": 0.1,
  "batch_histories": 5,
  "stream_histories": 40
}"#;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run<P: AsRef<std::ffi::OsStr>>(args: &[P]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("{}{}", stdout, String::from_utf8_lossy(&out.stderr)).trim().to_string())
    }
}

struct Workspace {
    dir: PathBuf,
    config: PathBuf,
    encoder: PathBuf,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn generate(&self, name: &str, users: usize, events: usize, seed: u64) -> Result<PathBuf, String> {
        let p = self.path(name);
        if !p.exists() {
            run(&[
                "generate".as_ref(),
                "--users".as_ref(),
                users.to_string().as_ref(),
                "--events".as_ref(),
                events.to_string().as_ref(),
                "--classes".as_ref(),
                "8".as_ref(),
                "--seed".as_ref(),
                seed.to_string().as_ref(),
                "-o".as_ref(),
                p.as_os_str(),
            ])?;
        }
        Ok(p)
    }

    /// Trains `method` and returns its test accuracy.
    fn train(&self, data: &Path, method: &str, seed: u64, prepend: bool, out: &str) -> Result<f64, String> {
        let dir = self.path(out);
        let seed = seed.to_string();
        let mut args: Vec<&std::ffi::OsStr> = vec![
            "train".as_ref(),
            "--config".as_ref(),
            self.config.as_os_str(),
            "--data".as_ref(),
            data.as_os_str(),
            "--encoder".as_ref(),
            self.encoder.as_os_str(),
            "--method".as_ref(),
            method.as_ref(),
            "--seed".as_ref(),
            seed.as_ref(),
            "-o".as_ref(),
            dir.as_os_str(),
        ];
        if prepend {
            args.push("--prepend-category".as_ref());
        }
        run(&args)?;
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        m["accuracy"].as_f64().ok_or_else(|| "metrics without accuracy".to_string())
    }
}

fn check_results(args: &[&str]) -> Result<Vec<Value>, String> {
    let out = run(args)?;
    let v: Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    Ok(v.as_array().cloned().unwrap_or_default())
}

fn named_checks(checks: &[Value], names: &[&str]) -> (bool, String) {
    let mut passed = true;
    let mut parts = Vec::new();
    for n in names {
        match checks.iter().find(|c| c["name"] == *n) {
            Some(c) => {
                passed &= c["passed"].as_bool().unwrap_or(false);
                parts.push(format!("{n} err={:.2e} tol={:.0e}", c["max_error"].as_f64().unwrap_or(f64::NAN), c["tolerance"].as_f64().unwrap_or(f64::NAN)));
            }
            None => {
                passed = false;
                parts.push(format!("{n} missing"));
            }
        }
    }
    (passed, parts.join("; "))
}

fn fmt_accs(accs: &[f64]) -> String {
    accs.iter().map(|a| format!("{:.2}", 100.0 * a)).collect::<Vec<_>>().join("/")
}

fn failed(id: usize, name: &'static str, err: String) -> Outcome {
    Outcome { id, name, passed: false, detail: format!("error: {err}") }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    match check_results(&["grad-check", "--json"]) {
        Ok(checks) => {
            let names = ["encoder", "upper_transformer", "classifier_head", "feature_set_model", "incremental_step"];
            let (ok, detail) = named_checks(&checks, &names);
            let elapsed = start.elapsed();
            Outcome {
                id: 1,
                name: "gradient correctness",
                passed: ok && elapsed < Duration::from_secs(120),
                detail: format!("{detail}; {:.1}s", elapsed.as_secs_f64()),
            }
        }
        Err(e) => failed(1, "gradient correctness", e),
    }
}

fn property_checks() -> Vec<Outcome> {
    let checks = match check_results(&["check", "--json"]) {
        Ok(c) => c,
        Err(e) => {
            return [(2, "store initialization"), (3, "momentum identities"), (4, "degenerate reduction"), (8, "weighted-loss identity"), (9, "chronology guard")]
                .into_iter()
                .map(|(id, name)| failed(id, name, e.clone()))
                .collect()
        }
    };
    let groups: [(usize, &'static str, &[&str]); 5] = [
        (2, "store initialization", &["initialization"]),
        (3, "momentum identities", &["momentum_alpha0", "momentum_alpha1", "momentum_alpha_half"]),
        (4, "degenerate reduction", &["degenerate_attn_mean", "degenerate_incremental_mean"]),
        (8, "weighted-loss identity", &["weighted_loss_balanced"]),
        (9, "chronology guard", &["chronology_guard"]),
    ];
    groups
        .into_iter()
        .map(|(id, name, names)| {
            let (passed, detail) = named_checks(&checks, names);
            Outcome { id, name, passed, detail }
        })
        .collect()
}

fn batch_trend(ws: &Workspace) -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let accs: Result<Vec<f64>, String> = (|| {
            let data = ws.generate(&format!("batch_{seed}.jsonl"), 100, 40, seed)?;
            ["q", "q_up_uh_mean", "q_up_uh_attn"]
                .iter()
                .map(|m| ws.train(&data, m, seed, false, &format!("batch_{m}_{seed}")))
                .collect()
        })();
        match accs {
            Ok(a) => {
                if a[2] > a[1] && a[1] > a[0] {
                    wins += 1;
                }
                rows.push(format!("seed {seed} q/mean/attn {}", fmt_accs(&a)));
            }
            Err(e) => return failed(5, "batch trend", e),
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 5,
        name: "batch trend attn > mean > q",
        passed: wins >= 2 && elapsed < Duration::from_secs(30 * 60),
        detail: format!("{}; ordered in {wins}/3; {:.0}s", rows.join(", "), elapsed.as_secs_f64()),
    }
}

struct StreamAccs {
    mean: f64,
    attn: f64,
    incremental: f64,
    prepend: f64,
    majority: f64,
}

fn stream_runs(ws: &Workspace, seed: u64) -> Result<StreamAccs, String> {
    let data = ws.generate(&format!("stream_{seed}.jsonl"), 50, 60, seed)?;
    Ok(StreamAccs {
        mean: ws.train(&data, "q_uh_mean", seed, false, &format!("stream_mean_{seed}"))?,
        attn: ws.train(&data, "q_uh_attn", seed, false, &format!("stream_attn_{seed}"))?,
        incremental: ws.train(&data, "incremental", seed, false, &format!("stream_inc_{seed}"))?,
        prepend: ws.train(&data, "incremental", seed, true, &format!("stream_inc_prep_{seed}"))?,
        majority: ws.train(&data, "majority", seed, false, &format!("stream_majority_{seed}"))?,
    })
}

fn stream_trends(ws: &Workspace) -> Vec<Outcome> {
    let mut runs = Vec::new();
    for &seed in &SEEDS {
        match stream_runs(ws, seed) {
            Ok(r) => runs.push(r),
            Err(e) => return vec![failed(6, "stream trend", e.clone()), failed(7, "category-prepend gain", e)],
        }
    }
    let above_mean = runs.iter().filter(|r| r.incremental > r.mean).count();
    let near_attn = runs.iter().filter(|r| r.incremental <= r.attn + 0.02).count();
    let t6 = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s} mean/inc/attn {}", fmt_accs(&[r.mean, r.incremental, r.attn])))
        .collect::<Vec<_>>()
        .join(", ");
    let prepend_gain = runs.iter().filter(|r| r.prepend > r.incremental).count();
    let over_majority = runs.iter().filter(|r| r.prepend > r.majority).count();
    let t7 = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s} majority/inc/inc+prepend {}", fmt_accs(&[r.majority, r.incremental, r.prepend])))
        .collect::<Vec<_>>()
        .join(", ");
    vec![
        Outcome {
            id: 6,
            name: "stream trend mean < incremental <= attn + 2",
            passed: above_mean >= 2 && near_attn == SEEDS.len(),
            detail: format!("{t6}; inc > mean in {above_mean}/3, inc <= attn+2 in {near_attn}/3"),
        },
        Outcome {
            id: 7,
            name: "category-prepend gain",
            passed: prepend_gain >= 2 && over_majority == SEEDS.len(),
            detail: format!("{t7}; gain in {prepend_gain}/3, above majority in {over_majority}/3"),
        },
    ]
}

fn determinism(ws: &Workspace) -> Outcome {
    let result: Result<(bool, String), String> = (|| {
        let data = ws.generate("stream_1.jsonl", 50, 60, 1)?;
        let mut artefacts = Vec::new();
        for k in 0..2 {
            let dir = ws.path(&format!("determinism_{k}"));
            let line = run(&[
                "train".as_ref(),
                "--config".as_ref(),
                ws.config.as_os_str(),
                "--seed".as_ref(),
                "1".as_ref(),
                "--data".as_ref(),
                data.as_os_str(),
                "--encoder".as_ref(),
                ws.encoder.as_os_str(),
                "-o".as_ref(),
                dir.as_os_str(),
            ])?;
            let metrics = fs::read(dir.join("metrics.json")).map_err(|e| e.to_string())?;
            let crc = line.split("crc32=").nth(1).unwrap_or("").trim().to_string();
            artefacts.push((metrics, crc));
        }
        let same = artefacts[0] == artefacts[1] && !artefacts[0].1.is_empty();
        Ok((same, format!("crc32 {} vs {}, metrics {} bytes", artefacts[0].1, artefacts[1].1, artefacts[0].0.len())))
    })();
    match result {
        Ok((passed, detail)) => Outcome { id: 10, name: "determinism", passed, detail },
        Err(e) => failed(10, "determinism", e),
    }
}

fn relative_improvement(ws: &Workspace) -> Outcome {
    let published = [("q", 0.1795, 0.0), ("q_up", 0.1923, 7.0), ("q_up_uh_mean", 0.2537, 41.0), ("q_up_uh_attn", 0.2902, 62.0)];
    let result: Result<(bool, String), String> = (|| {
        let mut paths = Vec::new();
        for (name, acc, _) in published {
            let p = ws.path(&format!("published_{name}.json"));
            let report = json!({
                "name": name, "method": name, "accuracy": acc, "per_class": [], "samples": 0,
                "config_hash": "", "seed": 0
            });
            fs::write(&p, report.to_string()).map_err(|e| e.to_string())?;
            paths.push(p);
        }
        let csv = ws.path("published.csv");
        let mut args: Vec<&std::ffi::OsStr> = vec!["compare".as_ref(), "--baseline".as_ref(), "q".as_ref(), "--csv".as_ref(), csv.as_os_str()];
        args.extend(paths.iter().map(|p| p.as_os_str()));
        run(&args)?;
        let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
        let mut ok = true;
        let mut got = Vec::new();
        for ((_, _, expect), line) in published.iter().zip(text.lines().skip(1)) {
            let rel: f64 = line.rsplit(',').next().and_then(|v| v.parse().ok()).ok_or("bad csv row")?;
            ok &= (rel.round() - expect).abs() <= 1.0;
            got.push(format!("{rel:.1}"));
        }
        ok &= got.len() == published.len();
        Ok((ok, format!("rel.imp {} vs 0/7/41/62", got.join("/"))))
    })();
    match result {
        Ok((passed, detail)) => Outcome { id: 11, name: "relative-improvement arithmetic", passed, detail },
        Err(e) => failed(11, "relative-improvement arithmetic", e),
    }
}

fn prepare(dir: &Path) -> Result<Workspace, String> {
    let config = dir.join("desk.json");
    fs::write(&config, DESK_CONFIG).map_err(|e| e.to_string())?;
    let mut ws = Workspace { dir: dir.to_path_buf(), config, encoder: dir.join("encoder.ckpt") };
    // The encoder warms up on its own corpus, disjoint from every
    // evaluated one.
    let pre = ws.generate("pretrain.jsonl", 100, 40, 1000)?;
    run(&[
        "pretrain-encoder".as_ref(),
        "--data".as_ref(),
        pre.as_os_str(),
        "--config".as_ref(),
        ws.config.as_os_str(),
        "-o".as_ref(),
        ws.encoder.as_os_str(),
    ])?;
    ws.encoder = dir.join("encoder.ckpt");
    Ok(ws)
}

fn main() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut outcomes = vec![gradient_correctness()];
    outcomes.extend(property_checks());
    match prepare(tmp.path()) {
        Ok(ws) => {
            outcomes.push(batch_trend(&ws));
            outcomes.extend(stream_trends(&ws));
            outcomes.push(determinism(&ws));
            outcomes.push(relative_improvement(&ws));
        }
        Err(e) => {
            for (id, name) in [(5, "batch trend"), (6, "stream trend"), (7, "category-prepend gain"), (10, "determinism"), (11, "relative-improvement arithmetic")] {
                outcomes.push(failed(id, name, format!("encoder warm-up: {e}")));
            }
        }
    }
    outcomes.sort_by_key(|o| o.id);
    let mut failures = 0;
    for o in &outcomes {
        if !o.passed {
            failures += 1;
        }
        println!("{} [{:>2}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        outcomes.len() - failures,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
