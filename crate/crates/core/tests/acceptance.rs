//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines are always
//! printed.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qtorhc::cli::{load_config, run_scenario, synthesize_scenario, RunOutcome};
use qtorhc::cost::QuadraticCost;
use qtorhc::integrator::{integrate, ControlSignal};
use qtorhc::model::{cartpole_model, linear_model, pendulum_model, ControlBounds, ControlModel};
use qtorhc::ocp::{eval_cost, eval_gradient, OcpProblem};
use qtorhc::rhc::{audit, rho_escalation, AdaptationState, AuditParams, InvariantKind, Mode, StepRecord};
use qtorhc::synthesis::{
    certify_alpha, is_hurwitz, lyapunov_residual, solve_care, solve_lyapunov, synthesize, CertifyOptions,
    LocalController,
};

type Outcome = Result<String, String>;

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn within(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let r = f();
    let took = start.elapsed();
    match r {
        Ok(detail) if took <= limit => Ok(format!("{detail} [{:.1}s]", took.as_secs_f64())),
        Ok(detail) => Err(format!("{detail}, but took {:.1}s > {:.0}s", took.as_secs_f64(), limit.as_secs_f64())),
        Err(e) => Err(format!("{e} [{:.1}s]", took.as_secs_f64())),
    }
}

fn weights(w: &[f64], r: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_diagonal(&DVector::from_column_slice(w)), DMatrix::from_element(1, 1, r))
}

fn c1_pendulum_gain() -> Outcome {
    let (a, b) = pendulum_model().linearize_at_origin();
    let (w, r) = weights(&[500.0, 500.0], 500.0);
    let s = solve_care(&a, &b, &w, &r).map_err(|e| e.to_string())?;
    let k = [s.gain[(0, 0)], s.gain[(0, 1)]];
    if k.iter().all(|v| within(*v, -6.81, 0.02)) {
        Ok(format!("K = [{:.4}, {:.4}]", k[0], k[1]))
    } else {
        Err(format!("K = {k:?}, expected [-6.81, -6.81] within 2%"))
    }
}

fn c2_cartpole_gain() -> Outcome {
    let (a, b) = cartpole_model().linearize_at_origin();
    let (w, r) = weights(&[1132.0, 100.0, 1.0, 1.0], 6.46);
    let s = solve_care(&a, &b, &w, &r).map_err(|e| e.to_string())?;
    let k: Vec<f64> = s.gain.iter().copied().collect();
    let want = [13.24, -81.74, 43.65, -80.63];
    let close = k.iter().zip(want).all(|(a, b)| within(*a, b, 0.02));
    let hurwitz = is_hurwitz(&(&a + &b * &s.gain));
    if close && hurwitz {
        Ok(format!("K = {:.4?}, A + BK Hurwitz", k))
    } else {
        Err(format!("K = {k:?} (within 2%: {close}), Hurwitz: {hurwitz}"))
    }
}

fn certify(model: &ControlModel, w: &[f64], r: f64, alpha: f64, delta: f64) -> Result<bool, String> {
    let cost = QuadraticCost::diagonal(w, &[r]).map_err(|e| e.to_string())?;
    let (a, b) = model.linearize_at_origin();
    let care = solve_care(&a, &b, &cost.w, &cost.r).map_err(|e| e.to_string())?;
    let a_k = &a + &b * &care.gain;
    let q = &cost.w + care.gain.transpose() * &cost.r * &care.gain;
    let h = solve_lyapunov(&a_k, &q).map_err(|e| e.to_string())?;
    let ctl = LocalController { model, gain: &care.gain, h: &h, cost: &cost, penalty_scale: 1.1 };
    let opts = CertifyOptions::for_sampling_time(delta);
    if opts.samples != 1000 {
        return Err(format!("{} boundary samples", opts.samples));
    }
    Ok(certify_alpha(&ctl, alpha, &opts).map_err(|e| e.to_string())?.passed())
}

fn c3_certification() -> Outcome {
    let p = certify(&pendulum_model(), &[500.0, 500.0], 500.0, 0.01, 0.05)?;
    let c = certify(&cartpole_model(), &[1132.0, 100.0, 1.0, 1.0], 6.46, 0.07, 0.2)?;
    if p && c {
        Ok("alpha = 0.01 (pendulum) and 0.07 (cart-pole) certified on 1000 samples".into())
    } else {
        Err(format!("pendulum certified: {p}, cart-pole certified: {c}"))
    }
}

fn c4_time_optimal_horizon() -> Outcome {
    let mut config = load_config(&configs().join("pendulum_time_optimal.json")).map_err(|e| e.to_string())?;
    config.solver.restarts = 5;
    if config.n != 64 || config.eps0 != 0.0 {
        return Err("scenario must use N = 64 and epsilon = 0".into());
    }
    let (plant, _) = synthesize_scenario(&config).map_err(|e| e.to_string())?;
    let rhc = config.rhc_config();
    let (sol, rho, _) =
        rho_escalation(&plant, &config.x0, &AdaptationState::initial(&rhc), &rhc, None).map_err(|e| e.to_string())?;
    let t = sol.horizon;
    if (11.9..=13.2).contains(&t) {
        Ok(format!("best T = {t:.4} at rho = {rho} (switching-time optimum 12.567)"))
    } else {
        Err(format!("best T = {t:.4}, outside [11.9, 13.2]"))
    }
}

struct Runs {
    pendulum_qto: RunOutcome,
    pendulum_time_optimal: RunOutcome,
    cartpole_qto: RunOutcome,
    cartpole_lq: RunOutcome,
    params: [AuditParams; 4],
}

impl Runs {
    fn all(&self) -> [(&'static str, &RunOutcome, &AuditParams); 4] {
        [
            ("pendulum qto", &self.pendulum_qto, &self.params[0]),
            ("pendulum time_optimal", &self.pendulum_time_optimal, &self.params[1]),
            ("cart-pole qto", &self.cartpole_qto, &self.params[2]),
            ("cart-pole lq", &self.cartpole_lq, &self.params[3]),
        ]
    }
}

fn run(name: &str, dir: &Path) -> Result<(RunOutcome, AuditParams), String> {
    let config = load_config(&configs().join(format!("{name}.json"))).map_err(|e| e.to_string())?;
    let out = run_scenario(&config, &dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
    let params = AuditParams::new(&config.rhc_config(), out.summary.alpha);
    Ok((out, params))
}

fn c5_swing_up(out: &RunOutcome) -> Outcome {
    let settle = out.summary.settling_time;
    let eps_one = out.history.records.iter().any(|r| r.epsilon == 1.0);
    match settle {
        Some(t) if t <= 25.0 && eps_one => {
            Ok(format!("|x| <= 0.01 from t = {t:.3}, epsilon = 1 reached, stopped at t = {:.2}", out.history.final_t))
        }
        _ => {
            Err(format!("settling time {settle:?}, epsilon reached 1: {eps_one}, converged: {}", out.summary.converged))
        }
    }
}

fn c6_cartpole(qto: &RunOutcome, lq: &RunOutcome) -> Outcome {
    match (qto.summary.settling_time, lq.summary.settling_time) {
        (Some(a), Some(b)) if a < b => Ok(format!("qto settles at {a:.3} s, lq at {b:.3} s")),
        (a, b) => Err(format!("qto settling {a:?}, lq settling {b:?}")),
    }
}

fn count(records: &[StepRecord], mode: Mode, p: &AuditParams, kinds: &[InvariantKind]) -> usize {
    audit(records, mode, p).iter().filter(|v| kinds.contains(&v.kind)).count()
}

fn c7_descent(runs: &Runs) -> Outcome {
    let mut detail = Vec::new();
    let mut bad = 0;
    for (name, out, p) in runs.all() {
        let n =
            count(&out.history.records, out.summary.mode, p, &[InvariantKind::Descent, InvariantKind::FrozenDescent]);
        bad += n;
        detail.push(format!("{name}: {n}"));
    }
    let checked: usize = runs
        .all()
        .iter()
        .map(|(_, o, _)| {
            o.history.records.windows(2).filter(|w| w[0].epsilon > 0.0 || o.summary.mode == Mode::TimeOptimal).count()
        })
        .sum();
    let msg = format!("descent violations {} over {checked} checked transitions", detail.join(", "));
    if bad == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fd_error(p: &OcpProblem, values: &[f64], horizon: f64) -> Result<f64, String> {
    let m = p.model.m();
    let sig = |v: &[f64], t: f64| ControlSignal::new(0.0, t, m, v.to_vec()).unwrap();
    let j = |v: &[f64], t: f64| eval_cost(p, &sig(v, t), t).map(|b| b.j).map_err(|e| e.to_string());
    let g = eval_gradient(p, &sig(values, horizon), horizon).map_err(|e| e.to_string())?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..values.len() {
        let h = 1e-6;
        let (mut vp, mut vm) = (values.to_vec(), values.to_vec());
        vp[i] += h;
        vm[i] -= h;
        let fd = (j(&vp, horizon)? - j(&vm, horizon)?) / (2.0 * h);
        num += (fd - g.controls[i]).powi(2);
        den += fd * fd;
    }
    let h = 1e-6 * horizon;
    let fd = (j(values, horizon + h)? - j(values, horizon - h)?) / (2.0 * h);
    num += (fd - g.horizon).powi(2);
    den += fd * fd;
    Ok((num / den).sqrt())
}

#[allow(clippy::too_many_arguments)]
fn problem(
    model: ControlModel,
    w: &[f64],
    r: f64,
    alpha: f64,
    x0: Vec<f64>,
    rng: &mut ChaCha8Rng,
    t_min: f64,
    delta: f64,
) -> OcpProblem {
    let cost = QuadraticCost::diagonal(w, &[r]).unwrap();
    let syn = synthesize(&model, &cost, 1.1, Some(alpha), &CertifyOptions::for_sampling_time(delta)).unwrap();
    OcpProblem {
        model,
        terminal: syn.terminal,
        cost,
        epsilon: rng.gen_range(0.0..=1.0),
        rho: rng.gen_range(1.0..1000.0),
        t_min,
        delta,
        x0: DVector::from_vec(x0),
        segments: 16,
        step: delta / 10.0,
        // fixed subdivision keeps the discrete cost smooth in T
        substeps: Some(6),
    }
}

fn c8_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: [f64; 2] = [0.0, 0.0];
    for _ in 0..20 {
        let x0 = vec![rng.gen_range(-3.5..3.5), rng.gen_range(-2.0..2.0)];
        let p = problem(pendulum_model(), &[500.0, 500.0], 500.0, 0.01, x0, &mut rng, 0.5, 0.05);
        let values: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let t = rng.gen_range(0.5..6.0);
        worst[0] = worst[0].max(fd_error(&p, &values, t)?);
    }
    for _ in 0..20 {
        let x0 = vec![
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ];
        let p = problem(cartpole_model(), &[1132.0, 100.0, 1.0, 1.0], 6.46, 0.07, x0, &mut rng, 1.3, 0.2);
        let values: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.9351..=3.9351)).collect();
        let t = rng.gen_range(1.3..4.0);
        worst[1] = worst[1].max(fd_error(&p, &values, t)?);
    }
    let msg =
        format!("worst relative error: pendulum {:.2e}, cart-pole {:.2e} (20 instances each)", worst[0], worst[1]);
    if worst.iter().all(|e| *e <= 1e-4) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_residuals() -> Outcome {
    let mut care = 0.0f64;
    let mut lyap = 0.0f64;
    for (model, w, r) in
        [(pendulum_model(), vec![500.0, 500.0], 500.0), (cartpole_model(), vec![1132.0, 100.0, 1.0, 1.0], 6.46)]
    {
        let (a, b) = model.linearize_at_origin();
        let (w, r) = weights(&w, r);
        let s = solve_care(&a, &b, &w, &r).map_err(|e| e.to_string())?;
        care = care.max(s.relative_residual);
        let a_k = &a + &b * &s.gain;
        let q = &w + s.gain.transpose() * &r * &s.gain;
        let h = solve_lyapunov(&a_k, &q).map_err(|e| e.to_string())?;
        lyap = lyap.max(lyapunov_residual(&a_k, &h, &q));
    }
    let decay = linear_model(
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::from_element(1, 1, 0.0),
        ControlBounds::symmetric(1.0, 1).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let err = |h: f64| -> Result<f64, String> {
        let sig = ControlSignal::constant(0.0, 1.0, 1, &[0.0]).map_err(|e| e.to_string())?;
        let traj = integrate(&decay, &DVector::from_element(1, 1.0), &sig, h).map_err(|e| e.to_string())?;
        Ok((traj.final_state()[0] - (-1.0f64).exp()).abs())
    };
    let ratio = err(0.1)? / err(0.05)?;
    let msg = format!("CARE relative residual {care:.1e}, Lyapunov residual {lyap:.1e}, RK4 order factor {ratio:.3}");
    if care <= 1e-8 && lyap <= 1e-10 && (14.0..=18.0).contains(&ratio) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c10_monotone(runs: &Runs) -> Outcome {
    let mut bad = Vec::new();
    let mut samples = 0;
    for (name, out, p) in runs.all() {
        samples += out.history.records.len();
        let n = count(
            &out.history.records,
            out.summary.mode,
            p,
            &[InvariantKind::Monotone, InvariantKind::TerminalMembership],
        );
        if n > 0 {
            bad.push(format!("{name}: {n}"));
        }
        if out.summary.mode != Mode::Lq {
            let records = &out.history.records;
            let ok = records.windows(2).all(|w| w[1].epsilon >= w[0].epsilon && w[1].rho >= w[0].rho)
                && records.iter().all(|r| (0.0..=1.0).contains(&r.epsilon) && r.rho >= 1.0)
                && records.iter().all(|r| r.terminal_level <= p.alpha);
            if !ok {
                bad.push(format!("{name}: direct check failed"));
            }
        }
    }
    if bad.is_empty() {
        Ok(format!("epsilon/rho monotone and terminal level <= alpha on all {samples} samples"))
    } else {
        Err(bad.join(", "))
    }
}

fn report(results: &mut Vec<bool>, id: usize, title: &str, r: Outcome) {
    match r {
        Ok(d) => {
            println!("PASS {id:>2} {title}: {d}");
            results.push(true);
        }
        Err(d) => {
            println!("FAIL {id:>2} {title}: {d}");
            results.push(false);
        }
    }
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "pendulum LQ gain", timed(Duration::from_secs(1), c1_pendulum_gain));
    report(&mut results, 2, "cart-pole LQ gain", timed(Duration::from_secs(1), c2_cartpole_gain));
    report(&mut results, 3, "terminal-set certification", timed(Duration::from_secs(30), c3_certification));
    report(&mut results, 4, "time-optimal horizon", timed(Duration::from_secs(300), c4_time_optimal_horizon));

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let pend = run("pendulum_qto", dir.path());
    let pend_time = start.elapsed();
    let start = Instant::now();
    let cart = run("cartpole_qto", dir.path()).and_then(|q| Ok((q, run("cartpole_lq", dir.path())?)));
    let cart_time = start.elapsed();
    let to = run("pendulum_time_optimal", dir.path());

    let check_time = |limit: u64, took: Duration, r: Outcome| {
        timed(Duration::from_secs(limit), || r).and_then(|d| {
            if took.as_secs() <= limit {
                Ok(format!("{d} [run {:.1}s]", took.as_secs_f64()))
            } else {
                Err(format!("{d}, but the run took {:.1}s", took.as_secs_f64()))
            }
        })
    };
    report(
        &mut results,
        5,
        "closed-loop swing-up",
        check_time(600, pend_time, pend.as_ref().map_err(Clone::clone).and_then(|(o, _)| c5_swing_up(o))),
    );
    report(
        &mut results,
        6,
        "cart-pole qto vs lq",
        check_time(600, cart_time, cart.as_ref().map_err(Clone::clone).and_then(|((q, _), (l, _))| c6_cartpole(q, l))),
    );
    match (pend, to, cart) {
        (Ok((p, pp)), Ok((t, tp)), Ok(((q, qp), (l, lp)))) => {
            let runs = Runs {
                pendulum_qto: p,
                pendulum_time_optimal: t,
                cartpole_qto: q,
                cartpole_lq: l,
                params: [pp, tp, qp, lp],
            };
            report(&mut results, 7, "descent invariants", c7_descent(&runs));
            report(&mut results, 8, "adjoint gradients", timed(Duration::from_secs(60), c8_gradients));
            report(&mut results, 9, "numerical residuals", c9_residuals());
            report(&mut results, 10, "monotone adaptation", c10_monotone(&runs));
        }
        (p, t, c) => {
            let why = [p.err(), t.err(), c.err()].into_iter().flatten().collect::<Vec<_>>().join("; ");
            report(&mut results, 7, "descent invariants", Err(format!("runs failed: {why}")));
            report(&mut results, 8, "adjoint gradients", timed(Duration::from_secs(60), c8_gradients));
            report(&mut results, 9, "numerical residuals", c9_residuals());
            report(&mut results, 10, "monotone adaptation", Err(format!("runs failed: {why}")));
        }
    }
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
