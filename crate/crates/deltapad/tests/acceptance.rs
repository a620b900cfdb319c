//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use deltapad::config::AppConfig;
use deltapad::Server;
use deltapad_core::config::DeviceModel;
use deltapad_core::experiment::{simulate_cohort, summarize};
use deltapad_core::kinematics::{forward_kinematics, inverse_kinematics, jacobian, max_normal_force, workspace_report};
use deltapad_core::patterns::{contact_point_position, ContactPatternId, Mode, PatternId, PatternLayout, StretchDirection};
use deltapad_core::protocol::{decode_frame, encode_frame, ServoCalibration, FRAME_LEN};
use deltapad_core::render::{Phase, Renderer};
use deltapad_core::responder::SyntheticResponder;
use deltapad_core::stats::{chi_square_sf, kruskal_wallis, mann_whitney_u, Method};
use deltapad_core::{DeltaGeometry, Pose, WorkspaceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn kinematics_round_trip() -> Outcome {
    let (g, spec) = (DeltaGeometry::default(), WorkspaceSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let poses: Vec<Pose> = (0..1000).map(|_| cylinder_pose(&mut rng, &spec)).collect();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for p in &poses {
        let back = forward_kinematics(&g, &inverse_kinematics(&g, p).unwrap()).unwrap();
        worst = worst.max(back.distance(p));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && elapsed < Duration::from_secs(1),
        format!("1000 poses, max |FK(IK(p)) - p| = {worst:.2e} mm, {:.1} ms", elapsed.as_secs_f64() * 1e3),
    )
}

fn jacobian_vs_finite_differences() -> Outcome {
    let (g, spec) = (DeltaGeometry::default(), WorkspaceSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = cylinder_pose(&mut rng, &spec);
        let j = jacobian(&g, &p).unwrap();
        let fd = fd_jacobian(&g, &p, 1e-4);
        let scale = j.amax();
        for (a, b) in j.iter().zip(fd.iter()) {
            worst = worst.max((a - b).abs() / a.abs().max(scale));
        }
    }
    outcome(worst < 1e-6, format!("200 poses, max relative error {worst:.2e}"))
}

fn workspace_feasibility() -> Outcome {
    let r = workspace_report(&DeltaGeometry::default(), &WorkspaceSpec::default()).unwrap();
    outcome(
        r.fraction_reachable == 1.0,
        format!("{}/{} grid points reachable ({:.1}%)", r.reachable, r.samples, 100.0 * r.fraction_reachable),
    )
}

fn force_capability() -> Outcome {
    let spec = WorkspaceSpec::default();
    let f = max_normal_force(&DeltaGeometry::default(), &Pose::new(0.0, 0.0, spec.contact_plane_z), 0.0196).unwrap();
    outcome((2.0..=3.6).contains(&f), format!("axis contact point: {f:.3} N with 0.0196 N*m per joint"))
}

fn trial_choreography() -> Outcome {
    let m = DeviceModel::default();
    let r = Renderer::new(&m);
    let tick = 1.0 / m.render.tick_rate;
    let hover_z = m.workspace.contact_plane_z - 5.0;
    let centre_hover = Pose::new(0.0, 0.0, hover_z);
    let mut hover_ok = true;
    let mut worst_dwell: f64 = 0.0;
    for id in ContactPatternId::ALL {
        let traj = r.contact_trial(id, m.render.default_force).unwrap();
        let target = contact_point_position(id, &m.layout);
        let first_contact = traj.waypoints.iter().position(|w| w.phase == Phase::Contact).unwrap();
        hover_ok &= traj.waypoints[..first_contact].iter().any(|w| w.pose == target.with_z(hover_z));
        let (a, b) = traj.phase_span(Phase::Contact).unwrap();
        worst_dwell = worst_dwell.max((b - a - 0.5).abs());
    }
    let mut stretch_home = true;
    for d in StretchDirection::ALL {
        let traj = r.stretch_trial(d, m.render.default_force).unwrap();
        stretch_home &= traj.last().pose == centre_hover && !traj.last().phase.in_contact();
    }
    outcome(
        hover_ok && worst_dwell <= tick + 1e-12 && stretch_home,
        format!(
            "hover at z = {hover_z} mm exact: {hover_ok}; contact phase off 0.5 s by at most {worst_dwell:.4} s (tick {tick} s); all 8 strokes end at centre hover: {stretch_home}"
        ),
    )
}

fn protocol_bit_exactness() -> Outcome {
    let cal = ServoCalibration::default();
    let mut golden_ok = true;
    for (pulses, duty, seq, body) in [
        ([1500u16, 1500, 1500], 0.0, 0u8, [0x00u8, 0xDC, 0x05, 0xDC, 0x05, 0xDC, 0x05, 0x00]),
        ([500, 2500, 1234], 1.0, 0xFE, [0xFE, 0xF4, 0x01, 0xC4, 0x09, 0xD2, 0x04, 0xFF]),
    ] {
        let mut expected = vec![0xA5, 0x5A];
        expected.extend(body);
        expected.push(crc8_oracle(&body));
        golden_ok &= encode_frame(pulses, duty, seq, &cal).unwrap().to_vec() == expected;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut flips = 0;
    let mut silent = 0;
    for _ in 0..50 {
        let pulses = [0; 3].map(|_| rng.random_range(500..=2500u16));
        let frame = encode_frame(pulses, rng.random::<f64>(), rng.random(), &cal).unwrap();
        for bit in 0..FRAME_LEN * 8 {
            let mut c = frame;
            c[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
            if decode_frame(&c).is_ok() {
                silent += 1;
            }
        }
    }
    let (wire, counts) = chain_errors(&cal);
    outcome(
        golden_ok && silent == 0 && counts <= 0.09,
        format!(
            "golden frames match oracle CRC: {golden_ok}; {silent}/{flips} single-bit flips decoded; chain error {wire:.4} deg at the wire pulse, {counts:.4} deg after PCA9685 counts (bound 0.09)"
        ),
    )
}

fn random_groups(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Vec<Vec<f64>> {
    // small integer values so ties are common
    sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(0..6) as f64).collect()).collect()
}

fn stats_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact_worst: f64 = 0.0;
    let mut exact_cases = 0;
    for _ in 0..150 {
        let k = rng.random_range(2..=4);
        let sizes: Vec<usize> = loop {
            let s: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
            if (3..=10).contains(&s.iter().sum::<usize>()) {
                break s;
            }
        };
        let g = random_groups(&mut rng, &sizes);
        let r = kruskal_wallis(&g).unwrap();
        let (h, p) = kw_oracle(&g);
        assert_eq!(r.method, Method::Exact);
        exact_worst = exact_worst.max((r.statistic - h).abs()).max((r.p_value - p).abs());
        let (na, nb) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let ab = random_groups(&mut rng, &[na, nb]);
        let m = mann_whitney_u(&ab[0], &ab[1]).unwrap();
        let (u, p) = mw_oracle(&ab[0], &ab[1]);
        assert_eq!(m.method, Method::Exact);
        exact_worst = exact_worst.max((m.statistic - u).abs()).max((m.p_value - p).abs());
        exact_cases += 2;
    }

    let samples = balanced_samples(8, 400);
    let mut mw_worst: f64 = 0.0;
    for g in samples.iter().take(200) {
        let m = mann_whitney_u(&g[0], &g[1]).unwrap();
        mw_worst = mw_worst.max((m.p_value - mw_oracle(&g[0], &g[1]).1).abs());
    }
    let dp = Kw3x8::build();
    let mut kw_worst: f64 = 0.0;
    for g in &samples {
        let r = kruskal_wallis(g).unwrap();
        kw_worst = kw_worst.max((r.p_value - dp.p(r.statistic)).abs());
    }

    let sf = chi_square_sf(3.841, 1).unwrap();
    let oracle = 1.0 - chi_square_cdf_oracle(3.841, 1);
    outcome(
        exact_worst < 1e-9 && mw_worst < 0.02 && kw_worst < 0.02 && (sf - 0.05).abs() <= 1e-3 && (sf - oracle).abs() < 1e-6,
        format!(
            "exact: {exact_cases} cases, max diff {exact_worst:.1e}; n = 8 approx vs exact: MW {mw_worst:.4}, KW 3x8 {kw_worst:.4} (bound 0.02); chi_square_sf(3.841, 1) = {sf:.5}, integration {oracle:.5}"
        ),
    )
}

fn study_replication() -> Outcome {
    let layout = PatternLayout::default();
    let start = Instant::now();
    let mut line = Vec::new();
    let mut pass = true;
    for (mode, target, want_sig) in [(Mode::Contact, 0.75, true), (Mode::Stretch, 0.83, false)] {
        let responder = SyntheticResponder::default_for(mode);
        let mut means = 0.0;
        let mut hits = 0;
        for seed in 0..100u64 {
            let cohort = simulate_cohort(mode, 16, seed, &responder, &layout).unwrap();
            let agg = summarize(&cohort).unwrap();
            means += agg.mean_rate;
            let p = kruskal_wallis(&agg.groups()).unwrap().p_value;
            if (p < 0.05) == want_sig {
                hits += 1;
            }
        }
        let mean = means / 100.0;
        let need = if want_sig { 80 } else { 60 };
        pass &= (mean - target).abs() <= 0.03 && hits >= need;
        line.push(format!(
            "{mode}: mean {:.1}% (target {:.0} +/- 3), {} {hits}/100 (need {need})",
            100.0 * mean,
            100.0 * target,
            if want_sig { "significant" } else { "nonsignificant" }
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    line.push(format!("{:.2} s", elapsed.as_secs_f64()));
    outcome(pass, line.join("; "))
}

async fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = AppConfig { data_dir: tmp.path().to_path_buf(), port: 0, realtime: false, ..AppConfig::default() };
    let http = reqwest::Client::new();

    let server = Server::start(&cfg).await.unwrap();
    let base = format!("http://{}", server.addr);
    let created: Value = http
        .post(format!("{base}/sessions"))
        .json(&json!({ "mode": "contact", "subject_id": "P01", "rng_seed": 2024 }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let id = created["session_id"].as_str().unwrap().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let subject = SyntheticResponder::default_for(Mode::Contact).subject(&mut rng);
    for _ in 0..45 {
        let p: Value = http.post(format!("{base}/sessions/{id}/present")).send().await.unwrap().json().await.unwrap();
        let trial = p["trial"].as_u64().unwrap() as usize;
        let s: Value = http.get(format!("{base}/sessions/{id}")).send().await.unwrap().json().await.unwrap();
        let truth: PatternId = serde_json::from_value(s["trials"][trial]["true_pattern"].clone()).unwrap();
        let r = subject.respond(truth, &mut rng).unwrap();
        let st = http
            .post(format!("{base}/sessions/{id}/response"))
            .json(&json!({ "trial": trial, "answer": r.answer.label(), "confidence": r.confidence }))
            .send()
            .await
            .unwrap()
            .status();
        assert!(st.is_success(), "{st}");
    }
    let report: Value = http.get(format!("{base}/sessions/{id}/report")).send().await.unwrap().json().await.unwrap();
    server.stop().await.unwrap();

    let trials = report["trials"].as_array().unwrap();
    let counts: Vec<Vec<u64>> = serde_json::from_value(report["confusion"]["counts"].clone()).unwrap();
    let total: u64 = counts.iter().flatten().sum();
    let rows_ok = counts.iter().all(|r| r.iter().sum::<u64>() == 5);
    let rates: Vec<f64> = report["per_pattern_rate"].as_array().unwrap().iter().map(|r| r["rate"].as_f64().unwrap()).collect();
    let diag_ok = rates.iter().enumerate().all(|(i, r)| (r - counts[i][i] as f64 / 5.0).abs() < 1e-12);
    let mean_ok = (report["mean_rate"].as_f64().unwrap() - rates.iter().sum::<f64>() / rates.len() as f64).abs() < 1e-12;
    let answered = trials.iter().all(|t| !t["response"].is_null());

    let server = Server::start(&cfg).await.unwrap();
    let again: Value = http
        .get(format!("http://{}/sessions/{id}/report", server.addr))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    server.stop().await.unwrap();
    let identical = again == report;

    outcome(
        trials.len() == 45 && answered && total == 45 && rows_ok && diag_ok && mean_ok && identical,
        format!(
            "{} trials, confusion total {total}, rows of 5: {rows_ok}, rates match diagonal: {diag_ok}, mean consistent: {mean_ok}; identical after restart: {identical}",
            trials.len()
        ),
    )
}

fn main() {
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("kinematics round trip", Box::new(kinematics_round_trip)),
        ("jacobian correctness", Box::new(jacobian_vs_finite_differences)),
        ("workspace feasibility", Box::new(workspace_feasibility)),
        ("force capability", Box::new(force_capability)),
        ("trial choreography", Box::new(trial_choreography)),
        ("protocol bit-exactness", Box::new(protocol_bit_exactness)),
        ("stats oracle equivalence", Box::new(stats_oracles)),
        ("study replication", Box::new(study_replication)),
        ("end-to-end api session", Box::new(move || runtime.block_on(end_to_end()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !o.pass {
            failed += 1;
        }
        println!("{} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
