//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traction_core::control::ControlMode;
use traction_core::fsm::{OperatorCommand, SessionPhase};
use traction_core::metrics::{error_stats, ComparisonPair, ErrorReport, ErrorStats, PairStats, RunStats};
use traction_core::model::{ForcepsGeometry, SpringModel, TissueModel};
use traction_core::plant::{rank_checks, ActuatorLimits, CutModel, Plant, PlantInput, PlantModels, PlantState};
use traction_core::runner::{
    run_cells, run_tracking_cell, run_traction, tracking_cells, write_tracking_outputs, CellResult, Outcome,
    TrackingKind,
};
use traction_core::scenario::{Scenario, ScriptRecord};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rank_tests() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let tissue =
            TissueModel { kt: rng.gen_range(1e-3..1.0), ct: rng.gen_range(0.0..0.1), ..TissueModel::default() };
        let spring = SpringModel { ks: rng.gen_range(0.1..10.0), ..SpringModel::default() };
        let geometry =
            ForcepsGeometry { l2: rng.gen_range(0.5..5.0), l3: rng.gen_range(0.5..15.0), ..ForcepsGeometry::default() }
                .with_theta(rng.gen_range(0.0..60f64).to_radians());
        let r = rank_checks(&tissue, &spring, &geometry);
        if !(r.controllable && r.observable) {
            return Err(format!("set {i}: {r:?} for kt {} ks {}", tissue.kt, spring.ks));
        }
    }
    let r = rank_checks(
        &TissueModel { kt: 0.0, ..TissueModel::default() },
        &SpringModel::default(),
        &ForcepsGeometry::default(),
    );
    check(r.controllable && !r.observable, format!("100 random sets full rank; kt = 0 gives {r:?}"))
}

fn closed_form() -> Verdict {
    let models = PlantModels {
        geometry: ForcepsGeometry::default().with_theta(10f64.to_radians()),
        spring: SpringModel { ks: 1.0, ..SpringModel::default() },
        tissue: TissueModel {
            kt: 0.1,
            ct: 0.01,
            grip_limit_ratio: f64::INFINITY,
            split_force: f64::INFINITY,
            break_grasp_force: f64::INFINITY,
        },
        limits: ActuatorLimits::default(),
    };
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (input, fp, fg) in
        [(PlantInput::new(1.0, 0.0), 0.11, 0.11 / 3.0), (PlantInput::new(0.0, 1.0), 0.11, 1.11 / 3.0)]
    {
        let mut plant = Plant::new(models, CutModel::default(), PlantState::engaged_at_rest(&models.tissue))
            .map_err(|e| e.to_string())?;
        let mut r = plant.readings();
        for _ in 0..1000 {
            r = plant.step(input, 1e-3).map_err(|e| e.to_string())?;
        }
        let err = (r.fp - fp).abs().max((r.fg - fg).abs());
        worst = worst.max(err);
        detail.push(format!("F_p {:.6} F_g {:.6}", r.fp, r.fg));
    }
    check(worst <= 1e-9, format!("{}; max error {worst:.2e} N", detail.join(", ")))
}

fn noiseless_rig() -> Scenario {
    let mut s = Scenario::tracking_rig();
    s.sim.noise_sd = 0.0;
    s.repeat = 1;
    s
}

fn rms(result: &CellResult, pair: ComparisonPair) -> f64 {
    result.stats.map(|s| s.get(pair).rms).unwrap_or(f64::INFINITY)
}

/// RMS per theta, ordered by frequency.
fn rms_by_theta(results: &[CellResult], pair: ComparisonPair) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(t, _)| *t == r.spec.theta_deg) {
            Some((_, v)) => v.push(rms(r, pair)),
            None => out.push((r.spec.theta_deg, vec![rms(r, pair)])),
        }
    }
    out
}

fn increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn fmt_series(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" < ")
}

fn grasp_tracking() -> Verdict {
    let s = noiseless_rig();
    let cells: Vec<_> = tracking_cells(&s, TrackingKind::Grasp).into_iter().filter(|c| c.amplitude == 0.2).collect();
    let results = run_cells(&s, &cells).map_err(|e| e.to_string())?;
    let base = results
        .iter()
        .find(|r| r.spec.theta_deg == 10.0 && r.spec.frequency_hz == Some(1.0 / 30.0))
        .map(|r| rms(r, ComparisonPair::FgTargetVsEst))
        .ok_or("no 10 deg 1/30 Hz cell")?;
    let by_theta = rms_by_theta(&results, ComparisonPair::FgTargetVsEst);
    let monotone = by_theta.iter().all(|(_, v)| increasing(v));
    let series = by_theta.iter().map(|(t, v)| format!("{t}°: {}", fmt_series(v))).collect::<Vec<_>>().join("; ");
    check(
        base <= 0.02 && monotone && results.iter().all(|r| r.error.is_none()),
        format!("RMS at 10°, 1/30 Hz = {base:.4} N (limit 0.02); {series}"),
    )
}

fn pull_tracking() -> Verdict {
    let s = noiseless_rig();
    let cells = tracking_cells(&s, TrackingKind::Pull);
    let results = run_cells(&s, &cells).map_err(|e| e.to_string())?;
    let u2_max = results.iter().flat_map(|r| r.records.iter()).map(|rec| rec.u2.abs()).fold(0.0, f64::max);
    let by_theta = rms_by_theta(&results, ComparisonPair::FpTargetVsEst);
    let monotone = by_theta.iter().all(|(_, v)| increasing(v));
    let series = by_theta.iter().map(|(t, v)| format!("{t}°: {}", fmt_series(v))).collect::<Vec<_>>().join("; ");
    check(
        monotone && u2_max == 0.0 && results.iter().all(|r| r.error.is_none()),
        format!("max |u2| = {u2_max}; {series}"),
    )
}

fn both_results(mode: ControlMode) -> Result<Vec<CellResult>, String> {
    let mut s = noiseless_rig();
    s.tracking.both.mode = mode;
    let cells = tracking_cells(&s, TrackingKind::Both);
    run_cells(&s, &cells).map_err(|e| e.to_string())
}

fn decoupling() -> Verdict {
    let decoupled = both_results(ControlMode::DecoupledPullGrasp)?;
    let pull_only = both_results(ControlMode::PullOnly)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for (d, p) in decoupled.iter().zip(&pull_only) {
        let dd = d.max_fg_deviation.unwrap_or(f64::INFINITY);
        let pd = p.max_fg_deviation.unwrap_or(f64::INFINITY);
        ok &= dd <= pd / 3.0;
        detail.push(format!("{}°: {dd:.4} vs {pd:.4} N", d.spec.theta_deg));
    }
    check(ok, format!("max F_g deviation decoupled vs pull-only: {}", detail.join(", ")))
}

fn fd_fs_mechanism() -> Verdict {
    let s = noiseless_rig();
    let both = &s.tracking.both;
    let (onset_t, ramp_end) = (both.pull_start, 18.0);
    let mut ok = true;
    let mut detail = Vec::new();
    for cell in tracking_cells(&s, TrackingKind::Both) {
        let result = run_tracking_cell(&s, &cell).map_err(|e| e.to_string())?;
        let recs: Vec<_> = result.records.iter().filter(|r| r.t >= onset_t - 1e-9).collect();
        let onset = recs.first().ok_or("empty pull phase")?;
        let end = recs.last().ok_or("empty pull phase")?;
        let fd_dev = recs.iter().map(|r| (r.fd - onset.fd).abs() / onset.fd).fold(0.0, f64::max);
        let pulled = end.fp_true - onset.fp_true;
        let fs_drop = onset.fs - end.fs;
        let drop_err = (fs_drop - pulled).abs() / pulled;
        let ramp: Vec<_> = recs.iter().filter(|r| r.t > onset_t + 0.5 && r.t <= ramp_end).collect();
        let decreasing = ramp.windows(2).all(|w| w[1].fs < w[0].fs);
        ok &= fd_dev <= 0.05 && drop_err <= 0.05 && decreasing;
        detail.push(format!(
            "{}°: F_d dev {:.1}%, F_s drop {fs_drop:.3} vs pull {pulled:.3} ({:.1}%), F_s decreasing on ramp: {decreasing}",
            cell.theta_deg,
            fd_dev * 100.0,
            drop_err * 100.0
        ));
    }
    check(ok, detail.join("; "))
}

fn four_cuts() -> Vec<ScriptRecord> {
    let mut v: Vec<ScriptRecord> = (0..4)
        .map(|_| ScriptRecord { t_offset_s: 0.0, command: OperatorCommand::Cut { cut_fraction: 0.55 } })
        .collect();
    v.push(ScriptRecord { t_offset_s: 0.0, command: OperatorCommand::ConfirmCutoff });
    v
}

fn traction_scenario(decouple: bool) -> Scenario {
    let mut s = Scenario::traction_reference();
    s.traction.params.decouple_during_pull = decouple;
    s.sim.noise_sd = 0.002;
    s.sim.seed = 42;
    s
}

fn traction_bytes(s: &Scenario, dir: &Path) -> Result<Vec<u8>, String> {
    let (run, outcome) = run_traction(s, four_cuts()).map_err(|e| e.to_string())?;
    run.write_outputs(dir, outcome).map_err(|e| e.to_string())?;
    fs::read(dir.join("trace.csv")).map_err(|e| e.to_string())
}

fn traction_end_to_end() -> Verdict {
    let s = traction_scenario(true);
    let (run, outcome) = run_traction(&s, four_cuts()).map_err(|e| e.to_string())?;
    let summary = run.summary(outcome);
    let expected = [0.25, 0.20, 0.16, 0.128];
    let schedule_ok = summary.schedule.len() == expected.len()
        && summary.schedule.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-12);
    let max_d_p = run.records().iter().map(|r| r.d_p).fold(f64::NEG_INFINITY, f64::max);
    let check_entry = run
        .phase_log()
        .iter()
        .find(|p| p.to == SessionPhase::OperatorCheck)
        .and_then(|p| run.records().iter().find(|r| (r.t - p.t).abs() < 1e-9))
        .map(|r| r.fp_est);
    let entered_below = check_entry.is_some_and(|fp| fp < 0.05);

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = traction_bytes(&s, &tmp.path().join("a"))?;
    let b = traction_bytes(&s, &tmp.path().join("b"))?;
    check(
        outcome == Outcome::Done && schedule_ok && max_d_p <= 30.0 + 1e-6 && entered_below && a == b,
        format!(
            "outcome {}, schedule {:?}, max d_p {max_d_p:.4} mm, operator check at F^e_p {:?}, repeat identical: {}",
            outcome.as_str(),
            summary.schedule,
            check_entry,
            a == b
        ),
    )
}

fn no_decoupling_sag() -> Verdict {
    let mut sag = Vec::new();
    for decouple in [true, false] {
        let (run, outcome) = run_traction(&traction_scenario(decouple), four_cuts()).map_err(|e| e.to_string())?;
        let s = run.summary(outcome);
        if outcome != Outcome::Done {
            return Err(format!("decouple = {decouple} ended {}", outcome.as_str()));
        }
        sag.push((s.final_fg_target - s.final_fg_true) / s.final_fg_target);
    }
    let (residual, sag) = (sag[0].abs(), sag[1]);
    check(
        sag >= 3.0 * residual,
        format!("pull-only sag {:.1}% vs decoupled residual {:.1}% of F*_g", sag * 100.0, residual * 100.0),
    )
}

fn metrics_oracle() -> Verdict {
    let series =
        |d: &[f64]| -> Result<ErrorStats, String> { error_stats(d, &vec![0.0; d.len()]).map_err(|e| e.to_string()) };
    let same = series(&[0.0; 5])?;
    let alt = series(&[0.1, -0.1, 0.1, -0.1])?;
    let two = series(&[0.0, 0.3])?;
    let hand_ok = same == ErrorStats::default()
        && alt == ErrorStats { mean: 0.1, rms: 0.1, max: 0.1 }
        && two.mean == 0.15
        && (two.rms - 0.2121).abs() < 5e-5
        && two.max == 0.3;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for set in 0..1000 {
        let groups = rng.gen_range(1..6);
        let mut runs = Vec::new();
        for _ in 0..rng.gen_range(1..30) {
            let g = rng.gen_range(0..groups);
            let mut stats = PairStats::default();
            for s in stats.0.iter_mut() {
                let mut v = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
                v.sort_by(f64::total_cmp);
                *s = ErrorStats { mean: v[0], rms: v[1], max: v[2] };
            }
            runs.push(RunStats {
                theta_deg: 10.0 * g as f64,
                frequency_hz: (g % 2 == 0).then_some(0.1),
                run: runs.len(),
                stats,
            });
        }
        let report = ErrorReport::from_runs(&runs).map_err(|e| e.to_string())?;
        for row in &report.rows {
            let flat: Vec<[f64; 12]> = runs
                .iter()
                .filter(|r| r.theta_deg == row.theta_deg && r.frequency_hz == row.frequency_hz)
                .map(|r| {
                    let mut out = [0.0; 12];
                    for (i, s) in r.stats.0.iter().enumerate() {
                        out[3 * i..3 * i + 3].copy_from_slice(&[s.mean, s.rms, s.max]);
                    }
                    out
                })
                .collect();
            for k in 0..12 {
                let brute = flat.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
                let s = row.worst.0[k / 3];
                let got = [s.mean, s.rms, s.max][k % 3];
                if got != brute || row.runs != flat.len() {
                    return Err(format!("set {set}: statistic {k} got {got}, brute force {brute}"));
                }
            }
        }
    }
    check(hand_ok, format!("1000 random report sets match brute force; hand examples {alt:?} {two:?}"))
}

fn determinism() -> Verdict {
    let mut s = Scenario::tracking_rig();
    s.sim.noise_sd = 0.01;
    s.sim.seed = 11;
    s.repeat = 1;
    let cells: Vec<_> = tracking_cells(&s, TrackingKind::Grasp)
        .into_iter()
        .filter(|c| c.theta_deg == 30.0)
        .take(1)
        .chain(tracking_cells(&s, TrackingKind::Both).into_iter().take(1))
        .collect();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let results = run_cells(&s, &cells).map_err(|e| e.to_string())?;
        write_tracking_outputs(&dir, &results).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for c in &cells {
            files.push(fs::read(dir.join("traces").join(c.trace_name())).map_err(|e| e.to_string())?);
        }
        outputs.push(files);
    }
    let mut t = traction_scenario(true);
    t.sim.noise_sd = 0.01;
    let ta = traction_bytes(&t, &tmp.path().join("ta"))?;
    let tb = traction_bytes(&t, &tmp.path().join("tb"))?;
    let mut other = t.clone();
    other.sim.seed += 1;
    let tc = traction_bytes(&other, &tmp.path().join("tc"))?;
    check(
        outputs[0] == outputs[1] && ta == tb && ta != tc,
        format!(
            "noise_sd 0.01: {} tracking traces and traction trace byte-identical on re-run; different seed differs: {}",
            cells.len(),
            ta != tc
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("rank tests", rank_tests),
        ("plant closed form", closed_form),
        ("grasp tracking", grasp_tracking),
        ("pull tracking", pull_tracking),
        ("decoupling benefit", decoupling),
        ("F_d/F_s mechanism", fd_fs_mechanism),
        ("traction end-to-end", traction_end_to_end),
        ("no-decoupling regression", no_decoupling_sag),
        ("metrics oracle", metrics_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let verdict = f();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {d}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
