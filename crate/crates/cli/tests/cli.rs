use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{Matrix3, Vector3};
use tempfile::TempDir;
use uncpnp::bench::{generate_trial, trial_rng, NoiseMode, NoiseSchedule, SceneSpec, Trial};
use uncpnp_cli::files::{
    parse_json, rows3, Intrinsics, LineRecord, PointRecord, PoseRecord, ProblemFile, ResultFile,
};

const K: Intrinsics = Intrinsics { fx: 800.0, fy: 780.0, cx: 320.0, cy: 240.0 };

fn uncpnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uncpnp")).args(args).output().unwrap()
}

fn m2(c: &nalgebra::Matrix2<f64>) -> [[f64; 2]; 2] {
    [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]
}

/// Problem file for a trial; with `k`, image data are given in pixels.
fn problem(trial: &Trial, k: Option<Intrinsics>) -> ProblemFile {
    let points = trial
        .corr
        .points
        .iter()
        .map(|p| {
            let (u, cov_u) = match &k {
                Some(k) => {
                    let d = nalgebra::Matrix2::new(k.fx, 0.0, 0.0, k.fy);
                    ([p.u.x * k.fx + k.cx, p.u.y * k.fy + k.cy], m2(&(d * p.cov_u * d)))
                }
                None => (p.u.into(), m2(&p.cov_u)),
            };
            PointRecord { x: p.x.into(), cov_x: rows3(&p.cov_x), u, cov_u }
        })
        .collect();
    let lines = trial
        .corr
        .lines
        .iter()
        .map(|l| {
            let line = match &k {
                // pixel line K⁻ᵀ l, left unnormalized
                Some(k) => {
                    let kinv_t = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0)
                        .try_inverse()
                        .unwrap()
                        .transpose();
                    (kinv_t * l.l * 3.0).into()
                }
                None => l.l.into(),
            };
            LineRecord {
                p: l.p.into(),
                q: l.q.into(),
                cov_p: rows3(&l.cov_p),
                cov_q: rows3(&l.cov_q),
                l: line,
                sigma_l2: l.sigma_l2 * 640_000.0,
            }
        })
        .collect();
    ProblemFile {
        intrinsics: k,
        points,
        lines,
        ground_truth: Some(PoseRecord::from(&trial.pose)),
        ..ProblemFile::default()
    }
}

fn exact_trial(n_points: usize, n_lines: usize, seed: u64) -> Trial {
    let schedule = NoiseSchedule { realize: false, ..NoiseSchedule::new(NoiseMode::Lines) };
    generate_trial(&SceneSpec::new(n_points, n_lines), &schedule, &mut trial_rng(seed, 0, 0)).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn write_problem(dir: &TempDir, name: &str, p: &ProblemFile) -> String {
    write(dir, name, &serde_json::to_string(p).unwrap())
}

fn read_result(path: &Path) -> ResultFile {
    parse_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exact_problem_recovers_the_embedded_pose() {
    let dir = TempDir::new().unwrap();
    let trial = exact_trial(20, 0, 1);
    for (name, k) in [("normalized.json", None), ("pixels.json", Some(K))] {
        let input = write_problem(&dir, name, &problem(&trial, k));
        let out = dir.path().join(format!("result-{name}"));
        for method in ["epnpu", "dlsu", "epnp", "dls"] {
            let o = uncpnp(&["solve", "--input", &input, "--method", method, "--output", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
            let r = read_result(&out);
            let err = r.ground_truth_error.unwrap();
            assert!(err.e_rot_deg < 1e-6 && err.e_trans_pct < 1e-6, "{method} {name}: {err:?}");
            assert_eq!(r.inliers.points, vec![true; 20]);
        }
    }
}

#[test]
fn line_aware_methods_read_pixel_lines() {
    let dir = TempDir::new().unwrap();
    let trial = exact_trial(10, 10, 2);
    let input = write_problem(&dir, "lines.json", &problem(&trial, Some(K)));
    let out = dir.path().join("r.json");
    for method in ["epnplu", "dlslu"] {
        let o = uncpnp(&["solve", "--input", &input, "--method", method, "--output", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let r = read_result(&out);
        assert!(r.ground_truth_error.unwrap().e_rot_deg < 1e-6);
        assert_eq!(r.inliers.lines, vec![true; 10]);
    }
}

#[test]
fn non_psd_covariance_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let mut p = problem(&exact_trial(20, 0, 3), None);
    p.points[7].cov_u = [[1e-6, 0.0], [0.0, -1e-6]];
    let input = write_problem(&dir, "bad.json", &p);
    let o = uncpnp(&["solve", "--input", &input]);
    assert_eq!(o.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("points[7]") && msg.contains("cov_u"), "{msg}");
}

#[test]
fn schema_violation_reports_the_field_path() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "bad.json", r#"{"points": [{"x": [1, 2], "cov_x": [[0,0,0],[0,0,0],[0,0,0]], "u": [0,0], "cov_u": [[1,0],[0,1]]}]}"#);
    let o = uncpnp(&["solve", "--input", &input]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("points[0].x"));
    let o = uncpnp(&["solve", "--input", "/nonexistent/problem.json"]);
    assert_eq!(o.status.code(), Some(1));
    let o = uncpnp(&["solve", "--input", &input, "--method", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn starred_solver_takes_the_ransac_hypothesis_when_none_is_given() {
    let dir = TempDir::new().unwrap();
    let trial = exact_trial(20, 0, 4);
    let out = dir.path().join("r.json");
    let mut p = problem(&trial, None);
    let input = write_problem(&dir, "p.json", &p);
    let o = uncpnp(&["solve", "--input", &input, "--method", "dlsu", "--starred", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_result(&out);
    assert_eq!(r.method, "dlsu*");
    assert_eq!(r.config.hypothesis, "ransac");
    assert!(r.ground_truth_error.unwrap().e_rot_deg < 1e-6);

    p.pose_hypothesis = Some(PoseRecord::from(&trial.pose));
    let input = write_problem(&dir, "h.json", &p);
    let o = uncpnp(&["solve", "--input", &input, "--method", "epnpu", "--starred", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_result(&out).config.hypothesis, "file");
}

#[test]
fn solver_failure_falls_back_with_exit_code_two() {
    // three points: RANSAC succeeds, the four-point solver cannot
    let dir = TempDir::new().unwrap();
    let input = write_problem(&dir, "p.json", &problem(&exact_trial(3, 0, 5), None));
    let out = dir.path().join("r.json");
    let o = uncpnp(&["solve", "--input", &input, "--method", "epnpu", "--refine", "none", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_result(&out);
    assert!(r.solver_failed_fallback_to_ransac);
    assert_eq!(r.pose, r.ransac_pose);
}

#[test]
fn solve_is_deterministic_under_a_seed() {
    let dir = TempDir::new().unwrap();
    let schedule = NoiseSchedule::new(NoiseMode::ThreeD);
    let trial = generate_trial(&SceneSpec::new(40, 0), &schedule, &mut trial_rng(6, 0, 0)).unwrap();
    let input = write_problem(&dir, "p.json", &problem(&trial, None));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = uncpnp(&["solve", "--input", &input, "--seed", "9", "--refine", "full", "--output", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        read_result(&out)
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert_eq!((a.pose, a.inliers, a.config), (b.pose, b.inliers, b.config));
}

fn bench(dir: &Path, extra: &[&str]) -> (String, String) {
    let mut args = vec!["bench", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = uncpnp(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    (
        std::fs::read_to_string(dir.join("trials.csv")).unwrap(),
        std::fs::read_to_string(dir.join("aggregate.csv")).unwrap(),
    )
}

#[test]
fn bench_tables_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let args = ["--mode", "3d", "--trials", "5", "--seed", "7", "--n-min", "10", "--n-max", "30"];
    let a = bench(&dir.path().join("a"), &args);
    let b = bench(&dir.path().join("b"), &args);
    assert_eq!(a, b);
    let one = Command::new(env!("CARGO_BIN_EXE_uncpnp"))
        .args(["bench", "--out-dir", dir.path().join("c").to_str().unwrap()])
        .args(args)
        .env("UNCPNP_THREADS", "1")
        .status()
        .unwrap();
    assert!(one.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("c/trials.csv")).unwrap(), a.0);
}

#[test]
fn lines_mode_pairs_every_point_with_a_line() {
    let dir = TempDir::new().unwrap();
    let (trials, agg) = bench(dir.path(), &["--mode", "lines", "--trials", "2", "--n-min", "10", "--n-max", "20", "--methods", "epnplu,dlsu"]);
    let mut rdr = csv::Reader::from_reader(trials.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let (np, nl) = (header.iter().position(|h| h == "n_points").unwrap(), header.iter().position(|h| h == "n_lines").unwrap());
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r[np] == r[nl]));
    let head = agg.lines().next().unwrap();
    for col in ["mean_e_rot_deg", "median_e_rot_deg", "mean_e_trans_pct", "median_e_trans_pct"] {
        assert!(head.contains(col), "{head}");
    }
    assert_eq!(agg.lines().count(), 1 + 2 * 2);
}

#[test]
fn invalid_sweep_bounds_are_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    for extra in [["--n-min", "30", "--n-max", "20"], ["--n-step", "0", "--trials", "1"], ["--n-min", "2", "--n-max", "5"]] {
        let mut args = vec!["bench", "--out-dir", d];
        args.extend_from_slice(&extra);
        assert_eq!(uncpnp(&args).status.code(), Some(1), "{extra:?}");
    }
    assert_eq!(uncpnp(&["bench", "--out-dir", d, "--methods", "epnq"]).status.code(), Some(1));
}

fn two_view_tracks(cov_scale: f64, baseline: f64) -> String {
    let x = Vector3::new(0.3, -0.2, 5.0);
    let poses = [
        uncpnp::Pose::identity(),
        uncpnp::Pose::new(Matrix3::identity(), Vector3::new(-baseline, 0.0, 0.0)),
    ];
    let views: Vec<_> = poses
        .iter()
        .map(|p| {
            let xc = p.transform(&x);
            serde_json::json!({
                "pose": PoseRecord::from(p),
                "u": [xc.x / xc.z, xc.y / xc.z],
                "cov_u": [[2e-6 * cov_scale, 5e-7 * cov_scale], [5e-7 * cov_scale, 1e-6 * cov_scale]],
            })
        })
        .collect();
    serde_json::json!({ "points": [{ "views": views }] }).to_string()
}

fn propagate(dir: &TempDir, tracks: &str) -> serde_json::Value {
    let input = write(dir, "tracks.json", tracks);
    let out = dir.path().join("landmarks.json");
    let o = uncpnp(&["propagate", "--tracks", &input, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap()
}

fn cov_of(v: &serde_json::Value) -> Vec<f64> {
    v["cov"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap())).collect()
}

#[test]
fn propagated_covariance_is_linear_in_the_image_covariance() {
    let dir = TempDir::new().unwrap();
    let a = propagate(&dir, &two_view_tracks(1.0, 1.0));
    let b = propagate(&dir, &two_view_tracks(4.0, 1.0));
    assert_eq!(a["points"][0]["status"], "ok");
    let (ca, cb) = (cov_of(&a["points"][0]), cov_of(&b["points"][0]));
    let scale = ca.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in ca.iter().zip(&cb) {
        assert!((4.0 * x - y).abs() < 1e-9 * scale);
    }
}

#[test]
fn near_parallel_rays_are_flagged_not_fatal() {
    let dir = TempDir::new().unwrap();
    let v = propagate(&dir, &two_view_tracks(1.0, 1e-7));
    assert_eq!(v["points"][0]["status"], "degenerate_baseline");
    assert!(v["points"][0].get("x").is_none());
}

#[test]
fn propagation_matches_the_frozen_sampling_reference() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dir = TempDir::new().unwrap();
    let got = propagate(&dir, &std::fs::read_to_string(root.join("tracks.json")).unwrap());
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("landmarks.json")).unwrap()).unwrap();
    fn flat(v: &serde_json::Value, out: &mut Vec<f64>) {
        match v {
            serde_json::Value::Number(n) => out.push(n.as_f64().unwrap()),
            serde_json::Value::Array(a) => a.iter().for_each(|x| flat(x, out)),
            serde_json::Value::Object(o) => o.values().for_each(|x| flat(x, out)),
            _ => {}
        }
    }
    let (mut g, mut w) = (Vec::new(), Vec::new());
    flat(&got, &mut g);
    flat(&want, &mut w);
    assert_eq!(g.len(), w.len());
    for (a, b) in g.iter().zip(&w) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "{a} vs {b}");
    }
    for p in got["points"].as_array().unwrap().iter().chain(got["segments"].as_array().unwrap()) {
        assert_eq!(p["status"], "ok");
    }
}

#[test]
fn full_sweep_aggregates_every_cell() {
    let dir = TempDir::new().unwrap();
    let (trials, agg) = bench(dir.path(), &["--mode", "3d", "--trials", "50", "--seed", "3"]);
    // 11 cells × 6 default methods
    assert_eq!(trials.lines().count(), 1 + 11 * 6 * 50);
    let mut rdr = csv::Reader::from_reader(agg.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 11 * 6);
    for r in &rows {
        for name in ["mean_e_rot_deg", "median_e_rot_deg", "mean_e_trans_pct", "median_e_trans_pct"] {
            let v: f64 = r[col(name)].parse().unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}
