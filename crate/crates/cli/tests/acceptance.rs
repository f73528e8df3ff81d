//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use spdevol::estimate::Increments;
use spdevol::harness::{run_experiment, run_experiment_with_threads, EstimatorKind, ExperimentConfig, SpatialLayout};
use spdevol::oracle::{increment_cov_matrix, theoretical_autocorrelation, KernelParams};
use spdevol::regress::{model_f, model_gradient};
use spdevol::simulate::{derive_seed, increments};
use spdevol::{ExperimentReport, InitialCondition, OperatorParams, SamplingGrid, Synthesizer, VolatilitySpec};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn check(id: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    let out = Outcome { id, pass, detail, secs: start.elapsed().as_secs_f64() };
    println!("[{}] {} {} ({:.1}s)", if out.pass { "PASS" } else { "FAIL" }, out.id, out.detail, out.secs);
    out
}

fn params(theta2: f64) -> OperatorParams {
    OperatorParams::new(0.0, 1.0, theta2).unwrap()
}

fn all_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Sigma2Multi, EstimatorKind::Quarticity, EstimatorKind::CurvatureLogratio, EstimatorKind::FitLeastSquares]
}

fn run(cfg: ExperimentConfig) -> ExperimentReport {
    run_experiment(&cfg).expect("experiment runs")
}

fn reference(m: usize, seed: u64, estimators: Vec<EstimatorKind>) -> ExperimentConfig {
    ExperimentConfig { m, seed, estimators, replications: 3000, ..ExperimentConfig::default() }
}

fn c1_gamma() -> (bool, String) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_spdevol")).args(["gamma", "--tol", "1e-8"]).output().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let s = v["series_sum"].as_f64().unwrap();
    let g = v["gamma"].as_f64().unwrap();
    let ok = out.status.success() && (s - 0.357487).abs() <= 1e-5 && (g - 0.75).abs() <= 0.005 && secs < 1.0;
    (ok, format!("gamma constant: S={s:.7} (0.357487±1e-5), Γ={g:.5} (0.75±0.005), runtime {secs:.3}s (<1s)"))
}

fn c2_autocorrelation() -> (bool, String) {
    let cfg = ExperimentConfig {
        params: params(0.5),
        spatial_layout: SpatialLayout::Explicit(vec![0.8]),
        replications: 200,
        seed: 2,
        estimators: vec![],
        autocorrelation_lags: 3,
        ..ExperimentConfig::default()
    };
    let rep = run(cfg);
    let want = [-0.2929, -0.0478, -0.0245];
    let ok = rep.mean_acf.iter().zip(&want).all(|(a, w)| (a - w).abs() <= 0.02);
    let theory: Vec<String> = (1..=3).map(|h| format!("{:.4}", theoretical_autocorrelation(h))).collect();
    let got: Vec<String> = rep.mean_acf.iter().map(|a| format!("{a:.4}")).collect();
    (ok, format!("autocorrelation lags 1-3: {got:?} vs {want:?} ±0.02 (closed form {theory:?})"))
}

fn c3_profile() -> (bool, String) {
    let cfg = ExperimentConfig { params: params(0.5), replications: 1000, seed: 3, estimators: vec![], ..ExperimentConfig::default() };
    let rep = run(cfg);
    let devs: Vec<f64> = rep.profile.iter().map(|p| (p.mean_rv / p.theory - 1.0).abs()).collect();
    let worst = devs.iter().cloned().fold(0.0, f64::max);
    (worst <= 0.05, format!("spatial RV profile: max relative deviation {:.4} over y=j/10 (≤0.05)", worst))
}

fn ratio_of(rep: &ExperimentReport, key: &str) -> (f64, f64) {
    let s = &rep.summary[key];
    (s.ratio.unwrap(), s.ratio_stderr.unwrap())
}

fn c4_variance(m9: &ExperimentReport) -> (bool, String) {
    let m99 = run(reference(99, 41, vec![EstimatorKind::Sigma2Multi]));
    let (r9, se9) = ratio_of(m9, "sigma2_multi");
    let (r99, se99) = ratio_of(&m99, "sigma2_multi");
    let ok = (0.85..=1.15).contains(&r9) && r99 > 1.2;
    (ok, format!("CLT variance ratio: m=9 {r9:.3}±{se9:.3} (in [0.85,1.15]), m=99 {r99:.3}±{se99:.3} (>1.2)"))
}

fn c5_coverage() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, seed) in [(9, 51), (1, 52)] {
        let cfg = ExperimentConfig {
            vol: VolatilitySpec::SineIntraday,
            ..reference(m, seed, vec![EstimatorKind::Sigma2Multi, EstimatorKind::Quarticity])
        };
        let rep = run(cfg);
        let cov = rep.coverage.unwrap();
        let qq = rep.qq.as_ref().unwrap();
        let bias = rep.summary["sigma2_multi"].mean / rep.truth.integrated_variance - 1.0;
        ok &= (0.93..=0.97).contains(&cov) && qq.ks_p_value >= 0.01;
        parts.push(format!("m={m}: coverage {cov:.4}, KS {:.4} p={:.3}, relative bias {bias:+.5}", qq.ks_stat, qq.ks_p_value));
    }
    (ok, format!("feasible CI, sine volatility: {} (coverage in [0.93,0.97], p≥0.01)", parts.join("; ")))
}

/// Not a criterion: C5 rerun with the modes above K simulated, to separate truncation bias
/// from the estimator's own finite-sample behaviour.
fn c5_tail_diagnostic() -> (bool, String) {
    let mut parts = Vec::new();
    for (m, seed) in [(9, 51), (1, 52)] {
        let cfg = ExperimentConfig {
            vol: VolatilitySpec::SineIntraday,
            tail_correction: true,
            ..reference(m, seed, vec![EstimatorKind::Sigma2Multi, EstimatorKind::Quarticity])
        };
        let rep = run(cfg);
        let qq = rep.qq.as_ref().unwrap();
        let s = &rep.summary["sigma2_multi"];
        parts.push(format!(
            "m={m}: coverage {:.4}, KS {:.4} p={:.3}, relative bias {:+.5}",
            rep.coverage.unwrap(),
            qq.ks_stat,
            qq.ks_p_value,
            s.mean / rep.truth.integrated_variance - 1.0
        ));
    }
    (true, format!("diagnostic, C5 with tail correction: {}", parts.join("; ")))
}

fn c6_least_squares(m9: &ExperimentReport) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    let m19 = run(reference(19, 61, all_estimators()));
    let m29 = run(reference(29, 62, all_estimators()));
    for rep in [m9, &m19, &m29] {
        let iv = &rep.summary["iv0_hat"];
        let kp = &rep.summary["kappa_hat"];
        let cv = &rep.summary["cov_iv0_kappa"];
        let truth = (5f64.sqrt() / 16.0, 5.0);
        let z_iv = (iv.mean - truth.0) / iv.mean_stderr;
        let z_kp = (kp.mean - truth.1) / kp.mean_stderr;
        let ratios = [iv.ratio.unwrap(), kp.ratio.unwrap(), cv.ratio.unwrap()];
        ok &= z_iv.abs() <= 3.0 && z_kp.abs() <= 3.0 && ratios.iter().all(|r| (r - 1.0).abs() <= 0.25);
        parts.push(format!(
            "m={}: mean z=({z_iv:.2}, {z_kp:.2}), cov ratios ({:.3}, {:.3}, {:.3})",
            rep.m, ratios[0], ratios[1], ratios[2]
        ));
    }
    (ok, format!("least squares: {} (|z|≤3, |ratio-1|≤0.25)", parts.join("; ")))
}

/// Not a criterion: the m=29 least-squares run with the modes above K simulated.
fn c6_tail_diagnostic() -> (bool, String) {
    let rep = run(ExperimentConfig { tail_correction: true, ..reference(29, 62, all_estimators()) });
    let iv = &rep.summary["iv0_hat"];
    let kp = &rep.summary["kappa_hat"];
    let z_iv = (iv.mean - 5f64.sqrt() / 16.0) / iv.mean_stderr;
    let z_kp = (kp.mean - 5.0) / kp.mean_stderr;
    (true, format!("diagnostic, C6 m=29 with tail correction: mean z=({z_iv:.2}, {z_kp:.2})"))
}

fn c7_oracle() -> (bool, String) {
    let (n, cutoff, y, reps) = (50, 100, 0.5, 100_000usize);
    let p = OperatorParams::reference();
    let sigma = 0.25;
    let kp = KernelParams::new(p, sigma, 1.0 / n as f64, cutoff).unwrap();
    let exact = increment_cov_matrix(&kp, n, y, InitialCondition::Zero).unwrap();

    let grid = SamplingGrid::new(n, vec![y]).unwrap();
    let synth = Synthesizer::new(p, VolatilitySpec::constant(sigma).unwrap(), grid, cutoff, 1).unwrap();
    let mut s1 = vec![0.0; n * n];
    let mut s2 = vec![0.0; n * n];
    for r in 0..reps {
        let field = synth.synthesize(derive_seed(7, r as u64), InitialCondition::Zero).unwrap();
        let d: Vec<f64> = increments(&field).column(0).to_vec();
        for i in 0..n {
            for j in i..n {
                let v = d[i] * d[j];
                s1[i * n + j] += v;
                s2[i * n + j] += v * v;
            }
        }
    }
    // the increments have mean zero exactly, so raw second moments estimate the covariance
    let rf = reps as f64;
    let (mut worst, mut misses) = (0.0f64, 0);
    for i in 0..n {
        for j in i..n {
            let mean = s1[i * n + j] / rf;
            let var = s2[i * n + j] / rf - mean * mean;
            let z = (mean - exact[i][j]).abs() / (var / rf).sqrt();
            worst = worst.max(z);
            misses += usize::from(z > 4.0);
        }
    }
    let psd = cholesky_with_jitter(&exact);
    (
        misses == 0 && psd,
        format!("exact covariance vs MC (n=50, K=100, 1e5 reps): worst |z|={worst:.2} (≤4), {misses} of 1275 entries outside, PSD {psd}"),
    )
}

fn cholesky_with_jitter(c: &[Vec<f64>]) -> bool {
    let n = c.len();
    let trace: f64 = (0..n).map(|i| c[i][i]).sum();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            if c[i][j] != c[j][i] {
                return false;
            }
            let mut s = c[i][j] + if i == j { 1e-10 * trace } else { 0.0 };
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}

/// Weyl sequence in `[0, 1)`, enough spread for deterministic spot checks.
fn weyl(i: usize, dim: usize) -> f64 {
    let alpha = [0.618_033_988_749_895, 0.754_877_666_246_693, 0.569_840_290_998_053][dim];
    (i as f64 * alpha).fract()
}

fn c8_invariants() -> (bool, String) {
    let mut fails = Vec::new();

    // eigenfunction orthonormality
    for i in 0..5 {
        let theta2 = 0.05 + 1.95 * weyl(i + 1, 0);
        let theta1 = (2.0 * weyl(i + 1, 1) - 1.0) * 6.0 * theta2;
        let p = OperatorParams::new(weyl(i + 1, 2) - 0.5, theta1, theta2).unwrap();
        for k in 1..=5 {
            for l in k..=5 {
                let g = p.inner_product(|y| p.eigenfunction(k, y).unwrap(), |y| p.eigenfunction(l, y).unwrap(), 4096);
                if (g - if k == l { 1.0 } else { 0.0 }).abs() > 1e-6 {
                    fails.push(format!("gram θ={:?} ({k},{l})={g}", (p.theta1(), p.theta2())));
                }
            }
        }
    }

    // Jacobian against central differences
    for i in 0..100 {
        let (iv0, kappa, y) = (0.01 + 2.0 * weyl(i + 1, 0), 16.0 * weyl(i + 1, 1) - 8.0, weyl(i + 1, 2));
        let g = model_gradient(iv0, kappa, y);
        let (h0, h1) = (1e-6 * iv0, 1e-6);
        let fd = [
            (model_f(iv0 + h0, kappa, y) - model_f(iv0 - h0, kappa, y)) / (2.0 * h0),
            (model_f(iv0, kappa + h1, y) - model_f(iv0, kappa - h1, y)) / (2.0 * h1),
        ];
        let scale = model_f(iv0, kappa, y);
        if (g[0] - fd[0]).abs() > 1e-6 * g[0].abs() || (g[1] - fd[1]).abs() > 1e-6 * g[1].abs().max(scale) {
            fails.push(format!("jacobian at {:?}", (iv0, kappa, y)));
        }
    }

    // scale equivariance
    let grid = SamplingGrid::equispaced(500, 9).unwrap();
    let p = OperatorParams::reference();
    let field = Synthesizer::new(p, VolatilitySpec::default(), grid, 5000, 1).unwrap().synthesize(8, InitialCondition::Zero).unwrap();
    let c = 2.5;
    let scaled = field.scaled(c);
    let (a, b) = (Increments::new(&field).unwrap(), Increments::new(&scaled).unwrap());
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs());
    let errs = [
        rel(b.sigma2_multi(&p).unwrap(), c * c * a.sigma2_multi(&p).unwrap()),
        rel(b.quarticity(&p).unwrap(), c.powi(4) * a.quarticity(&p).unwrap()),
        rel(b.curvature_logratio_default().unwrap(), a.curvature_logratio_default().unwrap()),
    ];
    if errs.iter().any(|e| *e > 1e-12) {
        fails.push(format!("scale equivariance {errs:?}"));
    }

    // telescoping autocorrelation sums
    let mut sum = 0.0;
    for h in 1..=1000 {
        sum += theoretical_autocorrelation(h);
        let hf = h as f64;
        if (sum + (1.0 + hf.sqrt() - (hf + 1.0).sqrt()) / 2.0).abs() > 1e-12 {
            fails.push(format!("telescoping at H={h}"));
            break;
        }
    }

    // reproducibility across worker counts
    let cfg = ExperimentConfig { n: 200, m: 5, cutoff: 1000, replications: 24, seed: 81, ..ExperimentConfig::default() };
    let max = std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1);
    let one = run_experiment_with_threads(&cfg, 1).unwrap();
    for t in [4, max] {
        if run_experiment_with_threads(&cfg, t).unwrap() != one {
            fails.push(format!("report differs with {t} workers"));
        }
    }

    let ok = fails.is_empty();
    let detail = if ok {
        "invariants: orthonormality, Jacobian, scale equivariance, telescoping, worker-count reproducibility".to_string()
    } else {
        format!("invariants failed: {}", fails.join("; "))
    };
    (ok, detail)
}

/// |ratio - 1| should not grow with n at fixed m, within 3 joint standard errors.
fn harness_consistency(m9: &ExperimentReport) -> (bool, String) {
    let mut pts = Vec::new();
    for (n, seed) in [(250, 91), (500, 92)] {
        pts.push((n, ratio_of(&run(ExperimentConfig { n, ..reference(9, seed, vec![EstimatorKind::Sigma2Multi]) }), "sigma2_multi")));
    }
    pts.push((1000, ratio_of(m9, "sigma2_multi")));
    let ok = pts.windows(2).all(|w| {
        let ((_, (ra, sa)), (_, (rb, sb))) = (w[0], w[1]);
        (rb - 1.0).abs() <= (ra - 1.0).abs() + 3.0 * sa.hypot(sb)
    });
    let txt: Vec<String> = pts.iter().map(|(n, (r, s))| format!("n={n}: {r:.3}±{s:.3}")).collect();
    (ok, format!("variance ratio vs n at m=9: {}", txt.join(", ")))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut outcomes = vec![check("C1", c1_gamma), check("C2", c2_autocorrelation), check("C3", c3_profile)];

    let t = Instant::now();
    let m9 = run(reference(9, 40, all_estimators()));
    println!("       shared reference run (m=9, 3000 replications) took {:.1}s", t.elapsed().as_secs_f64());
    outcomes.push(check("C4", || c4_variance(&m9)));
    outcomes.push(check("C5", c5_coverage));
    check("D5", c5_tail_diagnostic);
    outcomes.push(check("C6", || c6_least_squares(&m9)));
    check("D6", c6_tail_diagnostic);
    outcomes.push(check("C7", c7_oracle));
    outcomes.push(check("C8", c8_invariants));
    outcomes.push(check("H1", || harness_consistency(&m9)));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} passed in {:.0}s{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
