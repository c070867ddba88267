//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts the criterion, so `--nocapture` output doubles as a report.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radial_canon::angles::{circle_loss, loss_to_degrees, theta_to_k, Angle};
use radial_canon::beams::{circular_shift, geometry_row, max_beams, max_disjoint_tip_beams, sample, BeamMask};
use radial_canon::data::{generate, gradient_disk, lit_sphere, Dataset, SyntheticKind, SyntheticSpec};
use radial_canon::imageops::{optimal_padding, pad, rotate, rotate_point, Image, Interpolation, PadMode};
use radial_canon::net::model::{gnn_layer, lstm_cell, wheel_mixing};
use radial_canon::net::{grad_check, AnglePredictor, Tensor};
use radial_canon::toeplitz::{argmax, prior_distribution, shift_rows, similarity, toeplitz_logits, ToeplitzExtractor};
use radial_canon::train::{
    build_eval_cases, canonicalize, evaluate, stability_sweep, tail_mean, train, worst_deviation_within, BeamLength,
    FixedAngle, RotationRegime, TrainConfig, TrainOutcome, UniformRandom,
};

fn report(id: u32, ok: bool, detail: &str) {
    println!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} failed: {detail}");
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn criterion_01_optimal_padding() {
    let start = Instant::now();
    let fixed = optimal_padding(128) == 27 && optimal_padding(100) == 21;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0;
    for trial in 0..500 {
        let w = rng.random_range(1..=256usize);
        let deg = if trial == 0 { 45.0 } else { rng.random_range(0.0..360.0) };
        let d = optimal_padding(w);
        let n = w + 2 * d;
        let hi = n as f64 - 1.0 + 1e-9;
        for (r, c) in [(0, 0), (0, w - 1), (w - 1, 0), (w - 1, w - 1)] {
            let (rr, cc) = rotate_point((r + d) as f64, (c + d) as f64, n, Angle::from_degrees(deg));
            if !(rr >= -1e-9 && rr <= hi && cc >= -1e-9 && cc <= hi) {
                violations += 1;
            }
        }
    }
    let t = start.elapsed();
    report(
        1,
        fixed && violations == 0 && t < Duration::from_secs(1),
        &format!(
            "optimal_padding(128)={} optimal_padding(100)={}, {violations} corner violations over 500 pairs, {t:.2?}",
            optimal_padding(128),
            optimal_padding(100)
        ),
    );
}

#[test]
fn criterion_02_geometry_oracle() {
    let start = Instant::now();
    let mut worst = (0.0f64, 0, 0);
    let mut identity_err = 0.0f64;
    for b in [8, 16, 32] {
        for d in [16, 32, 64] {
            let row = geometry_row(b, d, 1, true).unwrap();
            let rel = row.rel_error.unwrap();
            println!(
                "  |B|={b:2} D={d:2}: approx coverage {:8.1} exact {:5} rel error {rel:.3}",
                row.coverage_approx,
                row.coverage_exact.unwrap()
            );
            if rel > worst.0 {
                worst = (rel, b, d);
            }
            let total = (b * 3 * d) as f64;
            identity_err = identity_err.max((row.coverage_approx + row.overlap_approx - total).abs());
        }
    }
    let t = start.elapsed();
    report(
        2,
        worst.0 <= 0.25 && identity_err <= 1e-6 && t < Duration::from_secs(10),
        &format!(
            "worst coverage rel error {:.3} at |B|={} D={} (limit 0.25), identity error {identity_err:.1e}, {t:.2?}",
            worst.0, worst.1, worst.2
        ),
    );
}

#[test]
fn criterion_03_beam_count_bound() {
    let start = Instant::now();
    let mut worst = String::from("none");
    let mut ok = true;
    for thickness in 0..=2usize {
        for d in 8..=64usize {
            let bound = max_beams(d, thickness);
            let found = max_disjoint_tip_beams(d, thickness, bound + bound / 4 + 2).unwrap();
            if found > bound {
                ok = false;
                worst = format!("D={d} ε={thickness}: {found} > {bound}");
            }
        }
    }
    let t = start.elapsed();
    report(
        3,
        ok && t < Duration::from_secs(30),
        &format!("no construction beyond floor(8D/(2ε+1)) for D in 8..=64, ε in 0..=2 (violation: {worst}), {t:.2?}"),
    );
}

#[test]
fn criterion_04_loss_analytics() {
    let start = Instant::now();
    let theta = Angle::from_degrees(135.0);
    let z = radial_canon::angles::UnitVec {
        re: theta.radians().sin(),
        im: theta.radians().cos(),
    };
    let max = circle_loss(theta, z);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..100_000 {
        let a = rng.random_range(-10.0..10.0);
        let b = rng.random_range(-10.0..10.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let z = radial_canon::angles::UnitVec {
            re: phi.cos(),
            im: phi.sin(),
        };
        let dl = (circle_loss(Angle::from_radians(a), z) - circle_loss(Angle::from_radians(b), z)).abs();
        let dt = (a - b).abs();
        if dl > 2.0 * dt + 1e-12 {
            violations += 1;
        }
    }
    let deg = loss_to_degrees(4.0).unwrap();
    let t = start.elapsed();
    report(
        4,
        (max - 4.0).abs() <= 1e-9 && violations == 0 && deg == 180.0 && t < Duration::from_secs(5),
        &format!("max loss {max:.12}, {violations} Lipschitz violations in 1e5 triples, loss_to_degrees(4)={deg}, {t:.2?}"),
    );
}

#[test]
fn criterion_05_autodiff_fidelity() {
    let start = Instant::now();
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let z = random_tensor(&[4, 2], &mut rng);
    let targets = [0.1, 1.7, -2.5, 3.0];
    let r = grad_check(&[z], tol, move |g, ids| {
        let u = g.normalize_rows(ids[0])?;
        g.circle_loss(u, &targets)
    });
    results.push(("circle loss", r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));

    let ins = [
        random_tensor(&[2, 2, 5, 6], &mut rng),
        random_tensor(&[3, 2, 3, 3], &mut rng),
        random_tensor(&[3], &mut rng),
    ];
    let r = grad_check(&ins, tol, |g, ids| {
        let y = g.conv2d(ids[0], ids[1], ids[2])?;
        let y = g.leaky_relu(y);
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    results.push(("conv2d", r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));

    for stride in [1, 2] {
        let ins = [
            random_tensor(&[2, 3, 11], &mut rng),
            random_tensor(&[4, 3, 4], &mut rng),
            random_tensor(&[4], &mut rng),
        ];
        let r = grad_check(&ins, tol, move |g, ids| {
            let y = g.conv1d(ids[0], ids[1], ids[2], stride)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        });
        let name = if stride == 1 { "conv1d stride 1" } else { "conv1d stride 2" };
        results.push((name, r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));
    }

    let mixing = std::rc::Rc::new(wheel_mixing(6, 0.5));
    let ins = [random_tensor(&[2, 6, 4], &mut rng), random_tensor(&[4, 4], &mut rng)];
    let r = grad_check(&ins, tol, move |g, ids| {
        let h = g.append_mean(ids[0])?;
        let y = gnn_layer(g, h, ids[1], mixing.clone())?;
        let y = g.add_center(y)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    results.push(("gnn layer", r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));

    let l = 4;
    let ins = [
        random_tensor(&[2, 3], &mut rng),
        random_tensor(&[2, l], &mut rng),
        random_tensor(&[2, l], &mut rng),
        random_tensor(&[3, 4 * l], &mut rng),
        random_tensor(&[l, 4 * l], &mut rng),
        random_tensor(&[4 * l], &mut rng),
    ];
    let r = grad_check(&ins, tol, |g, ids| {
        let (h, c) = lstm_cell(g, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])?;
        let (h, c) = lstm_cell(g, ids[0], h, c, ids[3], ids[4], ids[5])?;
        let hc = g.mul(h, c)?;
        Ok(g.sum(hc))
    });
    results.push(("lstm cell", r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));

    let ins = [
        random_tensor(&[3, 8], &mut rng),
        random_tensor(&[8, 4], &mut rng),
        random_tensor(&[4], &mut rng),
        random_tensor(&[4, 2], &mut rng),
        random_tensor(&[2], &mut rng),
        random_tensor(&[2, 2], &mut rng),
        random_tensor(&[2], &mut rng),
    ];
    let targets = [0.4, -1.2, 2.2];
    let r = grad_check(&ins, tol, move |g, ids| {
        let mut x = ids[0];
        for i in 0..3 {
            x = g.linear(x, ids[1 + 2 * i], ids[2 + 2 * i])?;
            if i < 2 {
                x = g.leaky_relu(x);
            }
        }
        let z = g.normalize_rows(x)?;
        g.circle_loss(z, &targets)
    });
    results.push(("head", r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));

    let ins = [random_tensor(&[2, 5, 3], &mut rng), random_tensor(&[2, 5, 3], &mut rng)];
    let r = grad_check(&ins, tol, |g, ids| {
        let xi = g.similarity(ids[0], ids[1])?;
        let logits = g.toeplitz_logits(xi)?;
        g.softmax_cross_entropy(logits, &[1, 3])
    });
    results.push(("toeplitz logits", r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)));

    let t = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(
        5,
        worst <= tol && t < Duration::from_secs(60),
        &format!("max relative error {worst:.1e} (limit 1e-4): {}, {t:.2?}", detail.join(", ")),
    );
}

#[test]
fn criterion_06_toeplitz_recovery() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for b in [3usize, 8, 16, 32] {
        let emb: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| if i == j { 2.0 } else { 0.1 * j as f64 }).collect())
            .collect();
        let ext = ToeplitzExtractor::new(b).unwrap();
        for k in 0..b {
            let query = shift_rows(&emb, k);
            let xi = similarity(&emb, &query).unwrap();
            let p = prior_distribution(&toeplitz_logits(&xi, &ext).unwrap());
            if argmax(&p) != k {
                failures.push(format!("|B|={b} k={k}"));
            }
        }
    }
    let k = theta_to_k(Angle::from_degrees(120.0), 3).unwrap();
    let emb = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let xi = similarity(&emb, &shift_rows(&emb, k)).unwrap();
    let worked = argmax(&prior_distribution(&toeplitz_logits(&xi, &ToeplitzExtractor::new(3).unwrap()).unwrap()));
    let t = start.elapsed();
    report(
        6,
        failures.is_empty() && k == 1 && worked == 1 && t < Duration::from_secs(5),
        &format!("argmax recovers every shift for |B| in {{3,8,16,32}} (misses: {failures:?}); |B|=3, θ=120° gives k={worked}, {t:.2?}"),
    );
}

#[test]
fn criterion_07_sampling_covariance() {
    let start = Instant::now();
    let size = 64;
    let blob = Image::from_fn(size, size, 1, |r, c, _| {
        let (dy, dx) = (r as f64 - 24.0, c as f64 - 38.0);
        (-(dx * dx + dy * dy) / 200.0).exp()
    });
    let images = [lit_sphere(size, 90.0, 0.4, 0.9), gradient_disk(size, 30.0, 0.45), blob];
    let delta = optimal_padding(size);
    let mask = BeamMask::build(size + 2 * delta, 16, 32, 1).unwrap();
    let mut worst = 0.0f64;
    for img in &images {
        let x = pad(img, delta, PadMode::Zero);
        let base = sample(&x, &mask).unwrap();
        for k in 0..16 {
            let rotated = rotate(&x, Angle::from_degrees(22.5 * k as f64), Interpolation::Bilinear).unwrap();
            let lhs = sample(&rotated, &mask).unwrap();
            worst = worst.max(lhs.mean_abs_diff(&circular_shift(&base, k)).unwrap());
        }
    }
    let t = start.elapsed();
    report(
        7,
        worst <= 0.05 && t < Duration::from_secs(10),
        &format!("worst mean abs difference {worst:.4} (limit 0.05) over 3 images × 16 shifts, {t:.2?}"),
    );
}

const DESK_SIZE: usize = 64;
const DESK_COUNT: usize = 512;

fn desk_data() -> Dataset {
    generate(&SyntheticSpec::new(SyntheticKind::LitSphere, DESK_SIZE, DESK_COUNT, 0)).unwrap()
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        num_beams: 16,
        beam_length: BeamLength::B,
        latent_dim: 32,
        learning_rate: 1e-3,
        rotation_regime: RotationRegime::Continuous,
        iterations: 800,
        seed: 1,
        ..TrainConfig::default()
    }
}

struct DeskRun {
    data: Dataset,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = desk_data();
        let start = Instant::now();
        let outcome = train(&desk_config(), &data).unwrap();
        DeskRun {
            data,
            outcome,
            elapsed: start.elapsed(),
        }
    })
}

fn held_out(run: &DeskRun) -> Vec<Image> {
    run.outcome.test_indices.iter().map(|&i| run.data.images[i].clone()).collect()
}

#[test]
fn criterion_08_desk_scale_learning() {
    let run = desk_run();
    let curve = &run.outcome.curve;
    let it10 = curve[9].loss;
    let last = tail_mean(curve, 10);
    let model = &run.outcome.model;
    let mc = model.config();
    let cases = build_eval_cases(&held_out(run), mc.pad, mc.pad_mode, RotationRegime::Continuous, 16, 4, 8).unwrap();
    let err = evaluate(model as &dyn AnglePredictor, &cases).unwrap().mean_error_deg;
    let baseline = evaluate(&UniformRandom::new(0xba5e), &cases).unwrap().mean_error_deg;
    let ok = curve.len() <= 5000
        && last <= 0.5 * it10
        && err <= 30.0
        && err < baseline
        && (baseline - 90.0).abs() <= 10.0
        && run.elapsed <= Duration::from_secs(600);
    report(
        8,
        ok,
        &format!(
            "{} iterations in {:.1?}; loss at iteration 10 {it10:.4}, final (mean of last 10) {last:.4}; held-out error {err:.2}° over {} cases vs uniform baseline {baseline:.2}°",
            curve.len(),
            run.elapsed,
            cases.len()
        ),
    );
}

#[test]
fn criterion_09_canonicalization_round_trip() {
    let x = pad(&lit_sphere(64, 90.0, 0.4, 0.9), optimal_padding(64), PadMode::Zero);
    let mut worst = 0.0f64;
    for step in 0..24 {
        let theta = Angle::from_degrees(15.0 * step as f64);
        let rotated = rotate(&x, theta, Interpolation::Bilinear).unwrap();
        let (back, predicted) = canonicalize(&FixedAngle(theta), &rotated).unwrap();
        assert_eq!(predicted, theta);
        worst = worst.max(back.mean_abs_diff(&x).unwrap());
    }
    report(
        9,
        worst <= 0.02,
        &format!("worst mean abs pixel error {worst:.4} (limit 0.02) over the 15° grid"),
    );
}

#[test]
fn criterion_10_determinism() {
    let first = desk_run();
    let second = train(&desk_config(), &first.data).unwrap();
    let a = &first.outcome.curve;
    let b = &second.curve;
    let identical = a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.iteration == y.iteration);
    report(
        10,
        identical,
        &format!("two seeded runs of {} iterations give bit-identical loss curves: {identical}", a.len()),
    );
}

#[test]
fn criterion_11_stability_harness() {
    let run = desk_run();
    let model = &run.outcome.model;
    let images: Vec<Image> = held_out(run).iter().take(8).map(|i| model.prepare(i).unwrap()).collect();
    let curve = stability_sweep(model, &images, 5, 1).unwrap();
    let full = curve.len() == 121
        && (-5..=5).all(|dy| (-5..=5).all(|dx| curve.iter().any(|p| p.dx == dx && p.dy == dy)));
    let origin = curve.iter().find(|p| p.dx == 0 && p.dy == 0).map(|p| p.mean_deviation_deg);
    let within3 = worst_deviation_within(&curve, 3);
    report(
        11,
        full && origin == Some(0.0),
        &format!(
            "{} grid points, deviation at (0,0) {:?}°; worst mean deviation within ±3 px {within3:.2}° (reported only, reference 5°), within ±5 px {:.2}°",
            curve.len(),
            origin,
            worst_deviation_within(&curve, 5)
        ),
    );
}
