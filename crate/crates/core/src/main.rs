use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = troop::cli::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::{Path, PathBuf};

    use troop::benchmark;
    use troop::cli::{self, emit_system_json, load_config};

    fn fixture() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/benchmark.json")
    }

    struct Output {
        code: i32,
        stdout: String,
        stderr: String,
    }

    fn troop(args: &[&str]) -> Output {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = cli::run(
            std::iter::once("troop").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        Output {
            code,
            stdout: String::from_utf8(out).unwrap(),
            stderr: String::from_utf8(err).unwrap(),
        }
    }

    #[test]
    fn plan_prints_sequence_and_budget() {
        let cfg = fixture();
        let o = troop(&[
            "plan",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "5",
            "--x=-1,0",
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let s = o.stdout;
        assert!(s.contains("sequence = (1,2,2,2,2)"), "{s}");
        let budget: u32 = s
            .split("budget = ")
            .nth(1)
            .unwrap()
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(budget <= 64);
    }

    #[test]
    fn plan_at_depth_zero() {
        let cfg = fixture();
        let o = troop(&[
            "plan",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "0",
            "--x",
            "1,0",
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let s = o.stdout;
        assert!(
            s.contains("sequence = ()") && s.contains("budget = 1 "),
            "{s}"
        );
        let value: f64 = s
            .split("value = ")
            .nth(1)
            .unwrap()
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(value, benchmark::feasible_terminal()[(0, 0)]);
    }

    #[test]
    fn plan_writes_dot() {
        let dir = tempfile::tempdir().unwrap();
        let dot = dir.path().join("t.dot");
        let cfg = fixture();
        let o = troop(&[
            "plan",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "5",
            "--x=-1,0",
            "--dot",
            dot.to_str().unwrap(),
        ]);
        assert_eq!(o.code, 0);
        let text = fs::read_to_string(dot).unwrap();
        assert!(text.starts_with("digraph") && text.trim_end().ends_with('}'));
    }

    #[test]
    fn malformed_json_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{\"modes\": [").unwrap();
        let o = troop(&[
            "plan",
            "--config",
            bad.to_str().unwrap(),
            "--d",
            "3",
            "--x",
            "1,0",
        ]);
        assert_eq!(o.code, 1);
        assert!(o.stderr.contains("invalid JSON"), "{}", o.stderr);
    }

    #[test]
    fn usage_errors_exit_one() {
        let cfg = fixture();
        let cfg = cfg.to_str().unwrap();
        for args in [
            vec!["plan", "--config", cfg, "--d", "3"],
            vec!["plan", "--config", cfg, "--d", "3", "--x", "1,0,0"],
            vec!["plan", "--config", cfg, "--d", "3", "--x", "one,0"],
            vec![
                "plan",
                "--config",
                "/nonexistent/system.json",
                "--d",
                "3",
                "--x",
                "1,0",
            ],
            vec!["simulate", "--config", cfg, "--d", "0", "--x", "1,0"],
            vec!["frobnicate"],
        ] {
            let o = troop(&args);
            assert_eq!(o.code, 1, "{args:?}: {}", o.stderr);
        }
    }

    #[test]
    fn explicit_infeasible_terminal_is_numerical_failure() {
        let cfg = fixture();
        let o = troop(&[
            "plan",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "3",
            "--x",
            "1,0",
            "--terminal",
            "explicit",
        ]);
        assert_eq!(o.code, 2);
    }

    #[test]
    fn bounds_reports_certificates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture();
        let o = troop(&[
            "bounds",
            "--config",
            cfg.to_str().unwrap(),
            "--x",
            "1,0",
            "--out",
            dir.path().to_str().unwrap(),
            "--json",
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
        assert_eq!(v["report"]["d_min"], 19);
        assert!((v["report"]["alpha"].as_f64().unwrap() - 0.14).abs() < 0.005);
        assert_eq!(v["gaps"].as_array().unwrap().len(), 1);
        let file: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("bounds.json")).unwrap())
                .unwrap();
        assert_eq!(file, v);
    }

    #[test]
    fn bounds_rejects_indefinite_upper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.json");
        let mut text: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(fixture()).unwrap()).unwrap();
        text["P_upper"] = serde_json::json!([[1.0, 0.0], [0.0, -1.0]]);
        fs::write(&path, text.to_string()).unwrap();
        let o = troop(&["bounds", "--config", path.to_str().unwrap()]);
        assert_eq!(o.code, 1);
    }

    #[test]
    fn simulate_from_origin_writes_zero_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture();
        let o = troop(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "19",
            "--x",
            "0,0",
            "--steps",
            "5",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let csv = fs::read_to_string(dir.path().join("trajectory_0.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 5);
        for row in rows {
            let f: Vec<&str> = row.split(',').collect();
            for k in [1, 2, 3, 5, 6] {
                assert_eq!(f[k].parse::<f64>().unwrap(), 0.0, "{row}");
            }
        }
    }

    #[test]
    fn simulate_at_depth_one_has_no_guarantee() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture();
        let o = troop(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "1",
            "--x",
            "1,0",
            "--steps",
            "10",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        assert!(o.stdout.contains("no guarantee"));
    }

    #[test]
    fn run_config_with_relative_system_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::copy(fixture(), dir.path().join("system.json")).unwrap();
        let run = dir.path().join("run.json");
        fs::write(
            &run,
            r#"{"system": "system.json", "d": 4, "x": [[0.0, 1.0]], "terminal": "zero"}"#,
        )
        .unwrap();
        let o = troop(&["plan", "--config", run.to_str().unwrap()]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        assert!(o.stdout.contains("x = [0, 1]"));

        fs::write(&run, r#"{"system": "system.json", "bogus": 1}"#).unwrap();
        assert_eq!(troop(&["plan", "--config", run.to_str().unwrap()]).code, 1);
    }

    #[test]
    fn verify_passes_on_small_grid() {
        let cfg = fixture();
        let o = troop(&[
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--d",
            "5",
            "--points",
            "6",
            "--random-systems",
            "2",
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        assert!(o.stdout.contains("verify passed"));
    }

    #[test]
    fn emitted_fixture_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emitted.json");
        let sys = benchmark::system();
        fs::write(
            &path,
            emit_system_json(
                &sys,
                Some(&benchmark::terminal()),
                Some(&benchmark::upper_bound()),
            ),
        )
        .unwrap();
        let a = load_config(&path).unwrap();
        let b = load_config(&fixture()).unwrap();
        assert_eq!(a.model.system.modes(), b.model.system.modes());
        assert_eq!(a.model.p_lower, b.model.p_lower);
        assert_eq!(a.model.p_upper, b.model.p_upper);
    }
}
