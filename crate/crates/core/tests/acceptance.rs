//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trains every model it needs from scratch (about 40 minutes on one core).
//! Set `ACCEPTANCE_CACHE=<dir>` to keep trained checkpoints between runs.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use treeik::datagen::{generate, NormStats};
use treeik::denoiser::*;
use treeik::diffusion::*;
use treeik::evalbench::*;
use treeik::fixtures;
use treeik::guidance::manipulability_grad;
use treeik::kinematics::{jacobian, link_transforms, parse_robot, sample_config, total_manipulability, RobotModel};

const RECORDS: usize = 200_000;
const DATA_SEED: u64 = 11;
const EVAL_SEED: u64 = 7;
const PLANAR_LIMIT: f64 = 2.6;

fn arch() -> ArchConfig {
    ArchConfig::new(3, 4, 64, 128)
}

fn recipe(p_drop: f64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 256,
        learning_rate: 1e-3,
        final_learning_rate: 1e-5,
        p_drop,
        seed: 5,
        ..TrainConfig::default()
    }
}

struct Outcome {
    passed: usize,
    total: usize,
}

impl Outcome {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        self.total += 1;
        self.passed += usize::from(pass);
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name}: {detail}");
    }
}

struct Trained {
    robot: RobotModel,
    params: DenoiserParams,
    train_secs: f64,
}

/// Trains on a fresh dataset, or loads the checkpoint from `ACCEPTANCE_CACHE`.
fn trained(text: &str, mode: ConditioningMode, p_drop: f64, records: usize, cfg: TrainConfig) -> Trained {
    let robot = parse_robot(text).unwrap();
    let arch = arch().with_conditioning(mode);
    let schedule = NoiseSchedule::default();
    let key = {
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(format!("{arch:?}{cfg:?}{records}{DATA_SEED}{p_drop}").as_bytes());
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };
    let cache = std::env::var_os("ACCEPTANCE_CACHE").map(PathBuf::from);
    if let Some(dir) = &cache {
        let ckpt = dir.join(format!("{key}.ckpt"));
        if let (Ok(params), Ok(secs)) = (
            load_params(&ckpt),
            std::fs::read_to_string(dir.join(format!("{key}.secs"))),
        ) {
            return Trained {
                robot,
                params,
                train_secs: secs.trim().parse().unwrap(),
            };
        }
    }
    let (data, _) = generate(&robot, records, DATA_SEED, 1).unwrap();
    let start = Instant::now();
    let out = train(&data, arch, &TrainConfig { p_drop, ..cfg }, &schedule).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    eprintln!(
        "  trained {} ({mode:?}) in {train_secs:.0} s, final loss {:.4}",
        robot.name(),
        out.log.last().unwrap().loss
    );
    if let Some(dir) = &cache {
        std::fs::create_dir_all(dir).unwrap();
        save_params(&out.params, &dir.join(format!("{key}.ckpt"))).unwrap();
        std::fs::write(dir.join(format!("{key}.secs")), format!("{train_secs}")).unwrap();
    }
    Trained {
        robot,
        params: out.params,
        train_secs,
    }
}

fn bench(scenario: Scenario, n_goals: usize) -> BenchConfig {
    BenchConfig {
        scenario,
        n_goals,
        samples_per_goal: 32,
        seed: EVAL_SEED,
        ..BenchConfig::default()
    }
}

fn run(cfg: &BenchConfig, models: &[(&str, &Trained)], schedule: &NoiseSchedule) -> Report {
    let bm: Vec<BenchModel<'_>> = models
        .iter()
        .map(|(label, t)| BenchModel {
            label,
            robot: &t.robot,
            params: &t.params,
            schedule,
        })
        .collect();
    run_benchmark(cfg, &bm).unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// Posterior mean from the clean-estimate form of the Gaussian posterior.
fn mean_via_q0(q_t: &[f64], eps: &[f64], t: usize, to: usize, s: &NoiseSchedule) -> Vec<f64> {
    let ab = |k: usize| if k == 0 { 1.0 } else { s.alpha_bar[k - 1] };
    let (ab_t, ab_s) = (ab(t), ab(to));
    let a = ab_t / ab_s;
    let q0: Vec<f64> = q_t
        .iter()
        .zip(eps)
        .map(|(x, e)| (x - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt())
        .collect();
    let c0 = ab_s.sqrt() * (1.0 - a) / (1.0 - ab_t);
    let ct = a.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    q0.iter().zip(q_t).map(|(x0, xt)| c0 * x0 + ct * xt).collect()
}

fn criterion_1(out: &mut Outcome) {
    let start = Instant::now();
    let s = make_schedule(100, 1e-4, 0.04).unwrap();
    let mut worst: f64 = 0.0;
    let mut prod = 1.0;
    for t in 0..100 {
        prod *= 1.0 - (1e-4 + t as f64 / 99.0 * (0.04 - 1e-4));
        worst = worst.max((s.alpha_bar[t] - prod).abs());
        if t > 0 && s.alpha_bar[t] >= s.alpha_bar[t - 1] {
            worst = f64::INFINITY;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let dof = rng.random_range(1..10);
        let q0: Vec<f64> = (0..dof).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..dof).map(|_| rng.sample(StandardNormal)).collect();
        let t = rng.random_range(1..=100);
        let qt = q_sample(&q0, t, &eps, &s);
        let back = estimate_q0(&qt, &eps, t, &s);
        let (mu, _) = posterior_mean_var(&qt, &eps, t, &s);
        let oracle = mean_via_q0(&qt, &eps, t, t - 1, &s);
        for j in 0..dof {
            worst = worst.max((back[j] - q0[j]).abs()).max((mu[j] - oracle[j]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    out.line(
        "C1",
        "diffusion algebra",
        worst <= 1e-12 && secs < 1.0,
        format!("max deviation {worst:.1e} (≤ 1e-12) over 10^3 draws in {secs:.3} s (< 1 s)"),
    );
}

// ---------------------------------------------------------------- criterion 2

fn denoiser_gradient_error() -> f64 {
    let arch = ArchConfig::new(1, 1, 16, 32);
    let (dof, n_ee, b) = (3, 2, 4);
    let stats = NormStats {
        q_lo: vec![-1.0; dof],
        q_hi: vec![1.0; dof],
        pos_scale: 1.0,
        pos_center: [0.0; 3],
    };
    let p = init_params(arch, dof, n_ee, stats, 3).unwrap();
    let mut w = p.weights.map(|v| v as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, data) in w.tensors_mut() {
        if name.ends_with(".norm") || name == "empty_token" {
            data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let batch = NoisyBatch {
        q_t: Array2::from_shape_fn((b, dof), |_| normal(&mut rng)),
        t_index: (0..b).map(|i| i * 30).collect(),
        eps: Array2::from_shape_fn((b, dof), |_| normal(&mut rng)),
        cond: Conditioning {
            feats: Array2::from_shape_fn((b * n_ee, 7), |_| normal(&mut rng) * 0.5),
            specified: (0..b * n_ee).map(|i| i % 3 != 1).collect(),
            n_tokens: n_ee,
        },
    };
    let (_, analytic) = loss_and_grads_fixed(&w, &arch, &batch);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = w.clone();
    for (ti, (_, a, _)) in analytic.tensors().into_iter().enumerate() {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nf = 0.0;
        for (k, &ak) in a.iter().enumerate() {
            let orig = probe.tensors_mut()[ti].1[k];
            probe.tensors_mut()[ti].1[k] = orig + h;
            let lp = loss_fixed(&probe, &arch, &batch);
            probe.tensors_mut()[ti].1[k] = orig - h;
            let lm = loss_fixed(&probe, &arch, &batch);
            probe.tensors_mut()[ti].1[k] = orig;
            let fk = (lp - lm) / (2.0 * h);
            diff += (ak - fk).powi(2);
            na += ak * ak;
            nf += fk * fk;
        }
        let rel = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300);
        worst = worst.max(rel);
    }
    worst
}

fn jacobian_error(model: &RobotModel, rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let q = sample_config(model, rng).unwrap();
        for ee in 0..model.n_ee() {
            let j = jacobian(model, &q, ee).unwrap();
            let link = model.end_effectors()[ee];
            for c in 0..model.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[c] += h;
                qm[c] -= h;
                let tp = link_transforms(model, &qp).unwrap()[link];
                let tm = link_transforms(model, &qm).unwrap()[link];
                let dp = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
                let dr = (tp.rotation * tm.rotation.inverse()).scaled_axis() / (2.0 * h);
                for r in 0..3 {
                    worst = worst.max((j[(r, c)] - dp[r]).abs()).max((j[(r + 3, c)] - dr[r]).abs());
                }
            }
        }
    }
    worst
}

fn manipulability_gradient_error(model: &RobotModel, rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let q = sample_config(model, rng).unwrap();
        let g = manipulability_grad(model, &q).unwrap();
        for c in 0..q.len() {
            let at = |d: f64| {
                let mut x = q.clone();
                x[c] += d;
                total_manipulability(model, &x).unwrap()
            };
            let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            worst = worst.max((g[c] - fd).abs());
        }
    }
    worst
}

fn criterion_2(out: &mut Outcome) {
    let start = Instant::now();
    let den = denoiser_gradient_error();
    let dual = parse_robot(fixtures::DUAL_WAIST).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let jac = jacobian_error(&dual, &mut rng);
    let man = manipulability_gradient_error(&dual, &mut rng);
    let secs = start.elapsed().as_secs_f64();
    out.line(
        "C2",
        "gradient oracles",
        den < 1e-3 && jac < 1e-5 && man < 1e-4 && secs < 60.0,
        format!(
            "denoiser rel {den:.1e} (< 1e-3), jacobian {jac:.1e} (< 1e-5), manipulability {man:.1e} (< 1e-4), {secs:.1} s (< 60 s)"
        ),
    );
}

// ---------------------------------------------------------------- criteria 3, 4, 11

fn planar(n: usize, len: f64) -> Trained {
    trained(
        &fixtures::planar_chain(n, len, PLANAR_LIMIT),
        ConditioningMode::Tokens,
        0.0,
        RECORDS,
        recipe(0.0),
    )
}

fn criteria_planar(out: &mut Outcome, schedule: &NoiseSchedule) {
    let p3_03 = planar(3, 0.3);
    let p3_06 = planar(3, 0.6);
    let p3_09 = planar(3, 0.9);
    let p4 = planar(4, 0.225);
    let p5 = planar(5, 0.18);
    let report = run(
        &bench(Scenario::Task6Scaling, 200),
        &[
            ("3dof_0.3m", &p3_03),
            ("3dof_0.6m", &p3_06),
            ("3dof_0.9m", &p3_09),
            ("3dof_0.3m", &p3_03),
            ("4dof_0.225m", &p4),
            ("5dof_0.18m", &p5),
        ],
        schedule,
    );
    for r in &report.records {
        eprintln!(
            "  {:<12} pos {:7.2} ± {:6.2} mm  ang {:5.2} ± {:5.2} deg",
            r.label, r.pos_mm_mean, r.pos_mm_std, r.ang_deg_mean, r.ang_deg_std
        );
    }
    let rec = &report.records;
    let base = &rec[0];
    out.line(
        "C3",
        "3-DoF 0.3 m chain accuracy",
        base.pos_mm_mean < 15.0 && base.ang_deg_mean < 2.0 && p3_03.train_secs <= 1800.0,
        format!(
            "pos {:.2} ± {:.2} mm (< 15), ang {:.2} ± {:.2} deg (< 2), training {:.0} s (≤ 1800)",
            base.pos_mm_mean, base.pos_mm_std, base.ang_deg_mean, base.ang_deg_std, p3_03.train_secs
        ),
    );

    let angs = [rec[0].ang_deg_mean, rec[1].ang_deg_mean, rec[2].ang_deg_mean];
    let mean_ang = angs.iter().sum::<f64>() / 3.0;
    let ang_stable = angs.iter().all(|a| (a - mean_ang).abs() < 0.5 * mean_ang);
    let pos_len = [rec[0].pos_mm_mean, rec[1].pos_mm_mean, rec[2].pos_mm_mean];
    let pos_grows = pos_len.windows(2).all(|w| w[1] > w[0]);
    let dof_pos = [rec[3].pos_mm_mean, rec[4].pos_mm_mean, rec[5].pos_mm_mean];
    let dof_ang = [rec[3].ang_deg_mean, rec[4].ang_deg_mean, rec[5].ang_deg_mean];
    let dof_nondecreasing = dof_pos.windows(2).all(|w| w[1] >= w[0]) && dof_ang.windows(2).all(|w| w[1] >= w[0]);
    out.line(
        "C4",
        "scaling trends",
        ang_stable && pos_grows && dof_nondecreasing,
        format!(
            "length pos {:.2?} mm increasing={pos_grows}, ang {:.2?} deg within ±50% of mean={ang_stable}; \
             dof pos {:.2?} mm ang {:.2?} deg nondecreasing={dof_nondecreasing}",
            pos_len, angs, dof_pos, dof_ang
        ),
    );

    let mut cfg = bench(Scenario::AppendixUnreachable, 50);
    cfg.sweep_inside = 2;
    cfg.sweep_outside = 6;
    let sweep = run(&cfg, &[("3dof_0.3m", &p3_03)], schedule);
    let mut within = true;
    let mut finite = true;
    let mut cells = Vec::new();
    for r in &sweep.records {
        finite &= r.pos_mm_mean.is_finite() && r.ang_deg_mean.is_finite();
        let short = r.shortfall_mm.unwrap();
        if short > 0.0 {
            within &= (r.pos_mm_mean - short).abs() <= 0.2 * short;
        }
        cells.push(format!(
            "{:+.2}m:{:.1}/{:.0}",
            r.offset_m.unwrap(),
            r.pos_mm_mean,
            short
        ));
    }
    let finite_solutions = sweep
        .solutions
        .iter()
        .flat_map(|s| s.per_goal.iter().flatten().flatten())
        .all(|v| v.is_finite());
    out.line(
        "C11",
        "unreachable sweep",
        within && finite && finite_solutions,
        format!(
            "offset:error/shortfall mm [{}], beyond reach within ±20% of shortfall={within}, all finite={}",
            cells.join(" "),
            finite && finite_solutions
        ),
    );
}

// ---------------------------------------------------------------- criteria 5 to 10, 12

fn criteria_dual(out: &mut Outcome, schedule: &NoiseSchedule) {
    let tokens = trained(
        fixtures::DUAL_WAIST,
        ConditioningMode::Tokens,
        0.2,
        RECORDS,
        recipe(0.2),
    );
    let flat = trained(fixtures::DUAL_WAIST, ConditioningMode::Flat, 0.0, RECORDS, recipe(0.0));

    let seeding = run(&bench(Scenario::Task2Seeding, 200), &[("dual", &tokens)], schedule);
    let gen = seeding.record("generated").unwrap();
    let rnd = seeding.record("random").unwrap();
    let (sg, sr) = (gen.success_rate.unwrap(), rnd.success_rate.unwrap());
    let (ig, ir) = (gen.iters_mean.unwrap_or(f64::NAN), rnd.iters_mean.unwrap_or(f64::NAN));
    out.line(
        "C5",
        "seeding the refiner",
        sg - sr >= 0.20 && ig < ir,
        format!(
            "success generated {:.1}% vs random {:.1}% (gap ≥ 20 pts), mean iterations {ig:.1} vs {ir:.1} (lower)",
            sg * 100.0,
            sr * 100.0
        ),
    );

    let warm = run(&bench(Scenario::Task4Warm, 200), &[("dual", &tokens)], schedule);
    let (u, g) = (warm.record("unguided").unwrap(), warm.record("guided").unwrap());
    let (ju, jg) = (u.joint_diff_pct.unwrap(), g.joint_diff_pct.unwrap());
    let reduction = 1.0 - jg / ju;
    let degrade = g.pos_mm_mean / u.pos_mm_mean - 1.0;
    out.line(
        "C6",
        "warm-start guidance",
        reduction >= 0.40 && degrade < 0.50,
        format!(
            "joint difference {ju:.2}% -> {jg:.2}% (reduction {:.1}% ≥ 40%), pos {:.2} -> {:.2} mm (degradation {:.1}% < 50%)",
            reduction * 100.0,
            u.pos_mm_mean,
            g.pos_mm_mean,
            degrade * 100.0
        ),
    );

    let manip = run(&bench(Scenario::Task4Manip, 200), &[("dual", &tokens)], schedule);
    let (u, g) = (manip.record("unguided").unwrap(), manip.record("guided").unwrap());
    let gain = g.manip_improvement_pct.unwrap();
    let degrade = g.pos_mm_mean / u.pos_mm_mean - 1.0;
    out.line(
        "C7",
        "manipulability guidance",
        gain > 10.0 && degrade < 0.50,
        format!(
            "manipulability {:.4} -> {:.4} (improvement {gain:.1}% > 10%), pos {:.2} -> {:.2} mm (degradation {:.1}% < 50%)",
            u.manipulability_mean.unwrap(),
            g.manipulability_mean.unwrap(),
            u.pos_mm_mean,
            g.pos_mm_mean,
            degrade * 100.0
        ),
    );

    let generation = run(&bench(Scenario::Task1Generation, 100), &[("dual", &tokens)], schedule);
    let full = generation.record("generated").unwrap();
    let marginal = run(&bench(Scenario::Task5Marginal, 200), &[("dual", &tokens)], schedule);
    let masked: Vec<&MetricsRecord> = marginal.records.iter().filter(|r| r.label != "masked_0").collect();
    let masked_pos = masked.iter().map(|r| r.pos_mm_mean * r.n_solutions as f64).sum::<f64>()
        / masked.iter().map(|r| r.n_solutions as f64).sum::<f64>();
    out.line(
        "C8",
        "marginal inference",
        masked_pos <= 2.0 * full.pos_mm_mean,
        format!(
            "masked-goal pos {masked_pos:.2} mm on specified slots vs fully specified {:.2} mm (ratio {:.2} ≤ 2)",
            full.pos_mm_mean,
            masked_pos / full.pos_mm_mean
        ),
    );

    let div = full.diversity.unwrap_or(f64::NAN);
    out.line(
        "C9",
        "diversity",
        div > 1.0,
        format!("mean diversity score {div:.3} (> 1.0) over 100 goals, 32 solutions per side"),
    );

    // flat inputs cannot be masked, so the like-for-like tokens model also trains without dropout
    let tokens_full = trained(
        fixtures::DUAL_WAIST,
        ConditioningMode::Tokens,
        0.0,
        RECORDS,
        recipe(0.0),
    );
    let ablation = run(
        &bench(Scenario::Task6Scaling, 200),
        &[("tokens", &tokens_full), ("flat", &flat), ("tokens_dropout", &tokens)],
        schedule,
    );
    let pos = |i: usize| ablation.records[i].pos_mm_mean;
    out.line(
        "C10",
        "tokens vs flat conditioning",
        pos(0) <= pos(1),
        format!(
            "tokens {:.2} mm ≤ flat {:.2} mm, same data, recipe and no dropout (tokens with dropout {:.2} mm)",
            pos(0),
            pos(1),
            pos(2)
        ),
    );

    criterion_12(out, &tokens, schedule);
}

fn criterion_12(out: &mut Outcome, dual: &Trained, schedule: &NoiseSchedule) {
    let small = recipe(0.2);
    let small = TrainConfig { epochs: 2, ..small };
    let robot = parse_robot(fixtures::DUAL_WAIST).unwrap();
    let (data, _) = generate(&robot, 4000, DATA_SEED, 1).unwrap();
    let a = train(&data, ArchConfig::new(1, 2, 16, 32), &small, schedule).unwrap();
    let b = train(&data, ArchConfig::new(1, 2, 16, 32), &small, schedule).unwrap();
    let same_ckpt = checkpoint_bytes(&a.params) == checkpoint_bytes(&b.params);

    let cfg = bench(Scenario::Task2Seeding, 30);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let files: Vec<(Vec<u8>, Vec<u8>)> = dirs
        .iter()
        .map(|d| {
            let (csv, json) = write_report(&run(&cfg, &[("dual", dual)], schedule), d.path()).unwrap();
            (std::fs::read(csv).unwrap(), std::fs::read(json).unwrap())
        })
        .collect();
    let same_report = files[0] == files[1];
    out.line(
        "C12",
        "reproducibility",
        same_ckpt && same_report,
        format!("retrained checkpoints identical={same_ckpt}, repeated seeding report files identical={same_report}"),
    );
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a name filter skips the suite
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return;
    }
    let start = Instant::now();
    let schedule = NoiseSchedule::default();
    let mut out = Outcome { passed: 0, total: 0 };
    criterion_1(&mut out);
    criterion_2(&mut out);
    criteria_planar(&mut out, &schedule);
    criteria_dual(&mut out, &schedule);
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        out.passed,
        out.total,
        start.elapsed().as_secs_f64()
    );
}
