//! End-to-end behaviour of the `duet` binary on the bundled fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use duet_core::assets;
use duet_core::body::{MotionSequence, PoseParams, SkinnedBody};
use duet_core::gauss::ply::load_ply;
use duet_core::motion::{object_base_transform, object_points, penetration_fraction, Binding, ResidualTransform};
use duet_core::render::read_png;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_duet");

/// Fixture directory with a manifest whose JSON can be patched per test.
struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let out = duet(&["fixtures", dir.to_str().unwrap()], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Self { _tmp: tmp, dir }
    }

    fn manifest(&self) -> Value {
        serde_json::from_str(&fs::read_to_string(self.dir.join("manifest.json")).unwrap()).unwrap()
    }

    /// Writes a patched manifest under `name` and returns its path.
    fn variant(&self, name: &str, patch: impl FnOnce(&mut Value)) -> PathBuf {
        let mut m = self.manifest();
        patch(&mut m);
        let p = self.dir.join(name);
        fs::write(&p, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        p
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn duet(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("DUET_SIDECAR_URL").env("RUST_LOG", "warn");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn run_ok(manifest: &Path, args: &[&str]) -> Value {
    let mut all = vec!["--manifest", manifest.to_str().unwrap()];
    all.extend_from_slice(args);
    let out = duet(&all, &[]);
    assert!(out.status.success(), "duet {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn exit_code(manifest: &Path, args: &[&str], env: &[(&str, &str)]) -> (i32, String) {
    let mut all = vec!["--manifest", manifest.to_str().unwrap()];
    all.extend_from_slice(args);
    let out = duet(&all, env);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Small, fast stage settings.
const FAST: [&str; 6] = ["--set", "resolution.sizes=[24,24,24]", "--set", "batch_size=2", "--set", "preview_every=1000"];

#[test]
fn help_lists_the_exit_codes() {
    let out = duet(&["--help"], &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["2  contact not found", "3  validation", "4  provider transport", "5  numeric", "DUET_SIDECAR_URL"] {
        assert!(text.contains(needle), "--help lacks `{needle}`:\n{text}");
    }
}

#[test]
fn contact_on_the_arm_lands_on_the_hand() {
    let fx = Fixture::new();
    let report = run_ok(&fx.dir.join("manifest.json"), &["contact"]);
    // known geometry: the arm cloud's gaussians beyond the wrist joint
    let hand: Vec<_> = assets::arm_cloud().means.into_iter().filter(|m| m.x > assets::ARM_JOINTS_X[3]).collect();
    let centroid = hand.iter().fold(nalgebra::Vector3::zeros(), |a, m| a + m) / hand.len() as f64;
    let t: Vec<f64> = serde_json::from_value(report["t_init"].clone()).unwrap();
    let err = (nalgebra::Vector3::new(t[0], t[1], t[2]) - centroid).norm();
    assert!(err < 0.05, "T_init {t:?} is {err:.4} from the hand centroid {centroid:?}");
    for f in ["contact.json", "overlay.png", "mask.png", "render.png"] {
        assert!(fx.out("out/contact").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn empty_mask_exits_2_naming_the_prompt() {
    let fx = Fixture::new();
    let m = fx.variant("zeros.json", |m| {
        m["providers"]["segmentation"] = json!("mock:zeros");
        m["mocks"]["mask"] = Value::Null;
    });
    let (code, err) = exit_code(&m, &["contact"], &[]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("\"hand\""), "{err}");
}

#[test]
fn missing_ply_exits_3_before_any_output() {
    let fx = Fixture::new();
    let m = fx.variant("missing.json", |m| {
        m["human"] = json!("nope.ply");
        m["output"] = json!("never");
    });
    for cmd in ["contact", "compose", "animate", "eval"] {
        let (code, err) = exit_code(&m, &[cmd], &[]);
        assert_eq!(code, 3, "{cmd}: {err}");
        assert!(err.contains("nope.ply"), "{err}");
    }
    assert!(!fx.out("never").exists());

    let bad_cfg = fx.variant("badcfg.json", |m| m["output"] = json!("never"));
    let (code, err) = exit_code(&bad_cfg, &["compose", "--skip-contact", "--set", "epochs=0"], &[]);
    assert_eq!(code, 3, "{err}");
    assert!(!fx.out("never").exists());
}

#[test]
fn unreachable_sidecar_exits_4() {
    let fx = Fixture::new();
    let m = fx.variant("sidecar.json", |m| m["providers"]["segmentation"] = json!("sidecar"));
    // no URL anywhere: validation
    assert_eq!(exit_code(&m, &["contact"], &[]).0, 3);
    let (code, err) = exit_code(&m, &["contact"], &[("DUET_SIDECAR_URL", "http://127.0.0.1:9")]);
    assert_eq!(code, 4, "{err}");
}

fn metric_lines(dir: &Path, stage: &str) -> Vec<String> {
    fs::read_to_string(dir.join(stage).join("metrics.ndjson")).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn one_epoch_logs_exactly_one_step_per_stage() {
    let fx = Fixture::new();
    let m = fx.dir.join("manifest.json");
    run_ok(&m, &["contact"]);
    let mut args = vec!["compose", "--set", "epochs=1"];
    args.extend(FAST);
    let s = run_ok(&m, &args);
    assert_eq!(s["steps"], 1);
    args[0] = "animate";
    let s = run_ok(&m, &args);
    assert_eq!(s["steps"], 1);
    for stage in ["compose", "animate"] {
        let lines = metric_lines(&fx.out("out"), stage);
        assert_eq!(lines.len(), 1, "{stage}: {lines:?}");
        assert!(lines[0].starts_with("{\"step\":0,"));
    }
    assert!(fx.out("out/compose/final/object.ply").is_file());
    assert!(fx.out("out/animate/final/animation.json").is_file());
}

#[test]
fn killed_compose_resumes_to_identical_logs() {
    let fx = Fixture::new();
    let steps = ["--set", "epochs=200", "--set", "checkpoint_every=5"];
    let full = fx.variant("full.json", |m| m["output"] = json!("full"));
    let killed = fx.variant("killed.json", |m| m["output"] = json!("killed"));
    let mut args: Vec<&str> = vec!["compose", "--skip-contact"];
    args.extend(steps);
    args.extend(FAST);
    run_ok(&full, &args);

    // interrupt a real run once it has written a checkpoint, mid-flight
    let mut cmd_args = vec!["--manifest", killed.to_str().unwrap()];
    cmd_args.extend(&args);
    let mut child = Command::new(BIN).args(&cmd_args).env("RUST_LOG", "warn").stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let marker = fx.out("killed/compose/000010/state.json");
    let start = Instant::now();
    while !marker.exists() && start.elapsed() < Duration::from_secs(120) {
        std::thread::sleep(Duration::from_millis(2));
    }
    child.kill().ok();
    child.wait().unwrap();
    assert!(marker.exists(), "no checkpoint was written");
    assert!(!fx.out("killed/compose/000200").exists(), "run finished before it could be interrupted");
    let mut resume = args.clone();
    resume.push("--resume");
    run_ok(&killed, &resume);
    assert_eq!(metric_lines(&fx.out("killed"), "compose"), metric_lines(&fx.out("full"), "compose"));

    // the deterministic interruption point as well
    let stopped = fx.variant("stopped.json", |m| m["output"] = json!("stopped"));
    let mut stop = args.clone();
    stop.extend(["--stop-after", "17"]);
    let s = run_ok(&stopped, &stop);
    assert_eq!(s["steps"], 17);
    assert_eq!(s["complete"], false);
    run_ok(&stopped, &resume);
    assert_eq!(fs::read(fx.out("stopped/compose/metrics.ndjson")).unwrap(), fs::read(fx.out("full/compose/metrics.ndjson")).unwrap());
}

#[test]
fn penetration_reported_by_eval_matches_the_direct_call() {
    let fx = Fixture::new();
    let m = fx.variant("pen.json", |m| m["object"] = json!("penetrating_cube.ply"));
    let report = run_ok(&m, &["eval", "--placed-object", "--canonical"]);
    let body = SkinnedBody::load(fx.dir.join("body.json")).unwrap();
    let motion = MotionSequence::load(fx.dir.join("motion.json")).unwrap();
    let object = load_ply(fx.dir.join("penetrating_cube.ply")).unwrap();
    let rest = body.pose(&PoseParams::zero(body.joint_count())).unwrap();
    let binding = Binding::new(&object.means, &rest.vertices).unwrap();
    let frames = report["frames"].as_array().unwrap();
    assert_eq!(frames.len(), motion.len());
    for (f, row) in frames.iter().enumerate() {
        let posed = body.pose(&motion.pose(f)).unwrap();
        let base = object_base_transform(&binding, &posed).unwrap();
        let (pts, _) = object_points(&object.means, &base, &ResidualTransform::identity());
        let direct = penetration_fraction(&pts, &posed.vertices, &body.faces);
        let reported = row["penetration"].as_f64().unwrap();
        assert!(reported > 0.0, "frame {f}");
        assert_eq!(reported.to_bits(), direct.to_bits(), "frame {f}: {reported} vs {direct}");
    }
    assert!(fx.out("out/eval/metrics.json").is_file());
}

#[test]
fn canonical_eval_has_zero_correspondence_loss_at_the_rest_frame() {
    let fx = Fixture::new();
    let m = fx.variant("held.json", |m| m["object"] = json!("held_cube.ply"));
    let report = run_ok(&m, &["eval", "--placed-object", "--canonical"]);
    let f0 = &report["frames"][0];
    assert_eq!(f0["frame"], 0);
    assert_eq!(f0["l_ca_hard"].as_f64().unwrap(), 0.0, "{f0}");
    // the soft assignment averages identity matrices with weights summing
    // to one up to rounding, so only squared round-off remains
    assert!(f0["l_ca"].as_f64().unwrap() < 1e-20, "{f0}");
    assert_eq!(report["animate"], Value::Null);
}

fn silhouette(path: &Path, mirror: bool) -> Vec<bool> {
    let img = read_png(path).unwrap();
    let mut out = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let sx = if mirror { img.width - 1 - x } else { x };
            out.push(img.get(sx, y, 0) >= 0.5);
        }
    }
    out
}

#[test]
fn turntable_half_turn_is_a_mirror_image_of_the_symmetric_scene() {
    let fx = Fixture::new();
    let m = fx.variant("held.json", |m| m["object"] = json!("held_cube.ply"));
    let views = run_ok(&m, &["render", "--placed-object", "--turntable", "4", "--size", "96"]);
    assert_eq!(views.as_array().unwrap().len(), 4);
    let dir = fx.out("out/render");
    let a = silhouette(&dir.join("static_v00_alpha.png"), false);
    let b = silhouette(&dir.join("static_v02_alpha.png"), true);
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    let iou = inter as f64 / union as f64;
    assert!(union > 100, "silhouette is empty");
    assert!(iou > 0.95, "mirrored IoU {iou}");
    // a quarter turn is not a mirror image: the check has teeth
    let c = silhouette(&dir.join("static_v01_alpha.png"), true);
    let inter = a.iter().zip(&c).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&c).filter(|(x, y)| **x || **y).count();
    assert!((inter as f64 / union as f64) < 0.9);
}

#[test]
fn posed_render_exports_frames_and_an_animation_manifest() {
    let fx = Fixture::new();
    let m = fx.variant("held.json", |m| m["object"] = json!("held_cube.ply"));
    let views = run_ok(&m, &["render", "--placed-object", "--frames", "0,59", "--size", "32", "--ply"]);
    assert_eq!(views.as_array().unwrap().len(), 2);
    let dir = fx.out("out/render");
    let anim: Value = serde_json::from_str(&fs::read_to_string(dir.join("animation.json")).unwrap()).unwrap();
    assert_eq!(anim["fps"], 30.0);
    assert_eq!(anim["frames"][1]["frame"], 59);
    assert_eq!(anim["frames"][1]["time"], 1.0);
    let f0 = load_ply(dir.join("f000.ply")).unwrap();
    let f59 = load_ply(dir.join("f059.ply")).unwrap();
    assert_eq!(f0.len(), 600 + 150);
    // the raised arm carries the cube upward
    let lift = |c: &duet_core::gauss::GaussianCloud| c.means[600..].iter().map(|m| m.y).sum::<f64>() / 150.0;
    assert!(lift(&f59) > lift(&f0) + 0.2, "{} vs {}", lift(&f59), lift(&f0));
    assert_eq!(exit_code(&m, &["render", "--placed-object", "--frames", "60"], &[]).0, 3);
}

#[test]
fn stale_checkpoint_versions_are_rejected_with_a_hint() {
    let fx = Fixture::new();
    let m = fx.dir.join("manifest.json");
    let mut args = vec!["compose", "--skip-contact", "--set", "epochs=1"];
    args.extend(FAST);
    run_ok(&m, &args);
    let state = fx.out("out/compose/000001/state.json");
    let text = fs::read_to_string(&state).unwrap().replace("\"version\": 1", "\"version\": 0");
    fs::write(&state, text).unwrap();
    let (code, err) = exit_code(&m, &["eval"], &[]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("version 0") && err.contains("convert"), "{err}");
}

#[test]
fn every_subcommand_is_deterministic() {
    let fx = Fixture::new();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let m = fx.variant(&format!("{name}.json"), |m| m["output"] = json!(name));
        run_ok(&m, &["contact"]);
        let mut args = vec!["compose", "--set", "epochs=3"];
        args.extend(FAST);
        run_ok(&m, &args);
        args[0] = "animate";
        run_ok(&m, &args);
        run_ok(&m, &["render", "--frames", "0,30", "--size", "32"]);
        run_ok(&m, &["eval"]);
        let out = fx.out(name);
        let files = [
            "contact/contact.json",
            "contact/overlay.png",
            "compose/metrics.ndjson",
            "compose/000003/state.json",
            "animate/metrics.ndjson",
            "animate/000003/state.json",
            "animate/000003/hexplane.bin",
            "render/f030_v00.png",
        ];
        outputs.push(files.map(|f| fs::read(out.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))));
        // eval names its checkpoint paths, which differ between the runs
        let eval: Value = serde_json::from_str(&fs::read_to_string(out.join("eval/metrics.json")).unwrap()).unwrap();
        outputs.last_mut().unwrap()[0].extend(serde_json::to_vec(&eval["frames"]).unwrap());
    }
    assert!(outputs[0] == outputs[1]);
}
