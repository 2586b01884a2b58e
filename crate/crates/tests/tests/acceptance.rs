//! Acceptance criteria A1 to A10. Each test prints one PASS/FAIL line that
//! bypasses the test harness's output capture.

use std::io::Write;
use std::time::{Duration, Instant};

use fedco::cooperation::{build_classifier_set, classifier_of, inter_client_loss, ClassifierSet};
use fedco::datagen::make_regression_clients;
use fedco::federation::{aggregate_mean, Algorithm, Mode, RoundConfig, Simulation};
use fedco::harness::{run, theory, ExperimentConfig, TheoryArgs};
use fedco::models::{init_mlp, overwrite_blocks, split_params, Bound, Group, MlpConfig, ParamSet, Part, Select};
use fedco::numerics::gradcheck::{run_gradcheck, GradcheckOptions};
use fedco::numerics::{sym_eig_min, BnMode, Tape, Tensor};
use fedco::theory::{
    block_mask, estimate_gram_von, gram_time_t, init_theory_net, train_theory_trajectories, GramKind,
    TheoryConfig, TheoryData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FEATURE_SKEW: &str = include_str!("../../../configs/feature_skew.json");
const LABEL_SKEW: &str = include_str!("../../../configs/label_skew.json");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Half a percentage point, as a fraction.
const SLACK: f64 = 0.005;

fn verdict(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{id} failed: {detail}");
}

/// Mean over seeds of the final mean test accuracy in `mode`.
fn mean_accuracy(base: &str, sets: &[&str], mode: Mode) -> f64 {
    let mut total = 0.0;
    for seed in SEEDS {
        let mut overrides: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        overrides.push(format!("seed={seed}"));
        let cfg = ExperimentConfig::from_json(base, &overrides).unwrap();
        let ds = cfg.build_dataset().unwrap();
        let mut sim = Simulation::new(cfg.round_config().unwrap(), cfg.mlp_config(&ds).unwrap(), &ds).unwrap();
        while !sim.done() {
            fedco::federation::run_round(&mut sim.server, &mut sim.clients, &sim.cfg, &sim.mlp).unwrap();
        }
        total += sim.mean_test_accuracy(mode).unwrap();
    }
    total / SEEDS.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

#[test]
fn a1_gradient_check() {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckOptions { seed: 0, configs: 50, flip_sign: None }).unwrap();
    let elapsed = start.elapsed();
    let pass = report.max_rel_err < 1e-4 && elapsed < Duration::from_secs(30);
    verdict(
        "A1",
        pass,
        &format!("50 configs, max rel err {:.2e} (worst {}), {:.1}s", report.max_rel_err, report.worst, elapsed.as_secs_f64()),
    );
}

#[test]
fn a2_eigenvalue_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let args = TheoryArgs { mc: 50_000, ..TheoryArgs::default() };
    let start = Instant::now();
    let result = theory(&args, dir.path());
    let elapsed = start.elapsed();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("theorem1.json")).unwrap()).unwrap();
    let trials = report["gram_check"]["trials"].as_array().unwrap();
    let held = trials
        .iter()
        .filter(|t| {
            let (on, off, mean) = (
                t["lambda_on"].as_f64().unwrap(),
                t["lambda_off"].as_f64().unwrap(),
                t["lambda_mean"].as_f64().unwrap(),
            );
            off >= on - 1e-9 && mean >= on - 1e-9
        })
        .count();
    let pass = result.is_ok() && trials.len() == 20 && held == 20 && elapsed < Duration::from_secs(120);
    verdict("A2", pass, &format!("both inequalities held in {held}/20 trials, {:.1}s", elapsed.as_secs_f64()));
}

#[test]
fn a3_gram_cross_validation() {
    let ds = make_regression_clients::<f64>(3, 4, 5, 7).unwrap();
    let data = TheoryData::from_dataset(&ds).unwrap();
    let cfg = TheoryConfig {
        n_clients: 3,
        m_per_client: 4,
        d: 5,
        width: 5000,
        alpha: 0.5,
        mc_samples: 100_000,
        seed: 7,
    };
    let mc = estimate_gram_von(&data.x, &data.client, &cfg).unwrap();
    let (on, _) = init_theory_net(&cfg, &data.covariances).unwrap();
    let finite = gram_time_t(&on, cfg.alpha, &data.x, &data.client, GramKind::VOn).unwrap();
    let p = data.len();
    let (mut within, mut worst) = (0, 0.0f64);
    for a in 0..p {
        for b in 0..p {
            let (e, t) = (mc.matrix.at(a, b), finite.at(a, b));
            let tol = (0.05 * e.abs()).max(3.0 * mc.stderr);
            within += usize::from((t - e).abs() <= tol);
            worst = worst.max((t - e).abs() / tol);
        }
    }

    // d = 1: every perpendicular component vanishes.
    let x1 = Tensor::<f64>::from_f64(&[4, 1], &[0.7, -1.3, 2.0, 0.4]).unwrap();
    let c1 = [0, 0, 1, 1];
    let cfg1 = TheoryConfig { n_clients: 2, m_per_client: 2, d: 1, width: 64, ..cfg.clone() };
    let covs = vec![Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap(); 2];
    let (on1, _) = init_theory_net(&cfg1, &covs).unwrap();
    let zero_mc = estimate_gram_von(&x1, &c1, &TheoryConfig { mc_samples: 5000, ..cfg1.clone() }).unwrap();
    let zero_t = gram_time_t(&on1, 0.5, &x1, &c1, GramKind::VOn).unwrap();
    let d1_zero = zero_mc.matrix.data().iter().chain(zero_t.data()).all(|&v| v == 0.0);

    let pass = within == p * p && d1_zero;
    verdict(
        "A3",
        pass,
        &format!(
            "{within}/{} entries within max(5%, 3 stderr), worst |diff|/tol {worst:.2}; diagonal ratio finite/MC {:.3}; d=1 zero: {d1_zero}",
            p * p,
            finite.at(0, 0) / mc.matrix.at(0, 0)
        ),
    );
}

#[test]
fn a4_trajectory_ordering() {
    let mut wins = 0;
    let mut descend = true;
    for seed in 0..10 {
        let cfg = TheoryConfig {
            n_clients: 3,
            m_per_client: 4,
            d: 5,
            width: 512,
            alpha: 0.5,
            mc_samples: 1000,
            seed,
        };
        let tr = train_theory_trajectories(&cfg, 200, None).unwrap();
        wins += usize::from(tr.fedco2[200] <= tr.online[200]);
        for c in [&tr.online, &tr.offline, &tr.fedco2] {
            descend &= c[200] < c[0];
        }
    }
    verdict("A4", wins >= 8 && descend, &format!("ensemble <= online at step 200 in {wins}/10; all curves descend: {descend}"));
}

#[test]
fn a5_feature_skew_comparison() {
    let start = Instant::now();
    let co2 = mean_accuracy(FEATURE_SKEW, &[], Mode::Fused);
    let base = |alg: &str| mean_accuracy(FEATURE_SKEW, &[&format!("federation.algorithm={alg}")], Mode::Online);
    let (fedbn, fedavg, single) = (base("FedBN"), base("FedAvg"), base("SingleSet"));
    let elapsed = start.elapsed();
    let best = fedbn.max(fedavg).max(single);
    let pass = co2 >= best - SLACK && co2 > fedavg && elapsed < Duration::from_secs(300);
    verdict(
        "A5",
        pass,
        &format!(
            "Fed-CO2 {} vs FedBN {} FedAvg {} SingleSet {} (5 seeds, {:.1}s)",
            pct(co2),
            pct(fedbn),
            pct(fedavg),
            pct(single),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn a6_ablation() {
    let run = |intra: bool, inter: bool| {
        mean_accuracy(
            FEATURE_SKEW,
            &[&format!("ablation.intra_transfer={intra}"), &format!("ablation.inter_transfer={inter}")],
            Mode::Fused,
        )
    };
    let (full, intra_only, inter_only, neither) = (run(true, true), run(true, false), run(false, true), run(false, false));
    let pass = neither < full && full >= intra_only - SLACK && full >= inter_only - SLACK;
    verdict(
        "A6",
        pass,
        &format!("full {} intra-only {} inter-only {} neither {}", pct(full), pct(intra_only), pct(inter_only), pct(neither)),
    );
}

#[test]
fn a7_label_skew_fusion() {
    let fused = mean_accuracy(LABEL_SKEW, &[], Mode::Fused);
    let online = mean_accuracy(LABEL_SKEW, &[], Mode::Online);
    let offline = mean_accuracy(LABEL_SKEW, &[], Mode::Offline);
    let pass = fused >= online.max(offline) - SLACK;
    verdict("A7", pass, &format!("fused {} online {} offline {} (5 seeds)", pct(fused), pct(online), pct(offline)));
}

fn small_sim(alg: Algorithm, bn: bool, rounds: usize) -> Simulation<f64> {
    let text = r#"{"seed": 5,
        "dataset": {"kind": "feature_skew", "n_clients": 4, "n_per_client": 40, "d": 6, "num_classes": 3},
        "model": {"hidden_widths": [12, 12]},
        "federation": {"algorithm": "FedAvg", "rounds": 1, "lr": 0.05, "batch_size": 8}}"#;
    let cfg = ExperimentConfig::from_json(text, &[]).unwrap();
    let ds = cfg.build_dataset().unwrap();
    let mut rc = RoundConfig::new(alg, rounds, 0.05, 5);
    rc.batch_size = 8;
    let mlp = MlpConfig { bn_after_hidden: bn, ..cfg.mlp_config(&ds).unwrap() };
    Simulation::new(rc, mlp, &ds).unwrap()
}

fn bn_of(p: &ParamSet<f64>) -> ParamSet<f64> {
    split_params(p, Select::Bn).0
}

fn identical(a: &Simulation<f64>, b: &Simulation<f64>) -> bool {
    a.clients.iter().zip(&b.clients).all(|(x, y)| x.online.bitwise_eq(&y.online))
        && a.server.shared.bitwise_eq(&b.server.shared)
}

#[test]
fn a8_protocol_invariants() {
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            failures.push(name);
        }
    };

    // BN locality.
    let mut base = small_sim(Algorithm::FedCo2Feature, true, 1);
    let mut poked = base.clone();
    let names: Vec<String> = poked.clients[0].online.trainable_names().map(str::to_string).collect();
    for n in names {
        if poked.clients[0].online.role(&n).unwrap().group == Group::Bn {
            poked.clients[0].online.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
    base.step().unwrap();
    poked.step().unwrap();
    check(
        (1..4).all(|i| bn_of(&base.clients[i].online).bitwise_eq(&bn_of(&poked.clients[i].online))),
        "bn locality",
    );
    check(
        base.server.shared.names().all(|n| base.server.shared.role(n).unwrap().group != Group::Bn),
        "server holds no bn blocks",
    );

    // Offline extractor isolation: only classifier blocks are uploaded.
    let pool = &base.server.classifier_pool;
    check(
        pool.entries().iter().all(|(_, h)| h.names().all(|n| h.role(n).unwrap().part == Part::Classifier)),
        "offline isolation",
    );
    let mut plain = small_sim(Algorithm::FedCo2Plain, true, 1);
    let mut plain_poked = plain.clone();
    for c in &mut plain_poked.clients {
        let off = c.offline.as_mut().unwrap();
        let ns: Vec<String> = off.trainable_names().map(str::to_string).collect();
        for n in ns {
            off.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }
    plain.step().unwrap();
    plain_poked.step().unwrap();
    check(plain.server.shared.bitwise_eq(&plain_poked.server.shared), "offline never reaches server");

    // Teacher immutability and classifier-set freezing.
    let pre_off: Vec<ParamSet<f64>> = base.clients.iter().map(|c| c.offline.clone().unwrap()).collect();
    base.step().unwrap();
    check(
        base.clients.iter().zip(&pre_off).all(|(c, p)| {
            let t = c.teacher_offline.as_ref().unwrap();
            t.all_frozen() && t.iter().all(|(n, v)| v.bitwise_eq(p.get(n).unwrap()))
        }),
        "teacher immutability",
    );
    check(
        base.clients.iter().all(|c| !c.classifier_set.is_empty() && c.classifier_set.entries().iter().all(|(_, h)| h.all_frozen())),
        "classifier set frozen",
    );

    // Empty-sum L_gen.
    let mlp = &base.mlp;
    let params = &base.clients[0].online;
    let x = base.clients[0].data.x_train.clone();
    let y = base.clients[0].data.y_train.clone();
    let gen = |set: &ClassifierSet<f64>| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, true);
        let xv = tape.constant(x.clone());
        let out = mlp.forward_tape(&mut tape, &bound, params, xv, BnMode::Train).unwrap();
        let l = inter_client_loss(&mut tape, out.features, set, 0, &y).unwrap();
        tape.value(l).data()[0]
    };
    let own = build_classifier_set(&[(0, classifier_of(params))]).unwrap();
    check(gen(&ClassifierSet::new()) == 0.0 && gen(&own) == 0.0, "empty-sum L_gen");

    // FedProx(0) == FedAvg and FedBN without BN == FedAvg.
    let mut avg = small_sim(Algorithm::FedAvg, true, 3);
    let mut prox = small_sim(Algorithm::FedProx, true, 3);
    prox.cfg.mu_prox = 0.0;
    avg.run().unwrap();
    prox.run().unwrap();
    check(identical(&avg, &prox), "FedProx(0) == FedAvg");
    let mut avg_nobn = small_sim(Algorithm::FedAvg, false, 3);
    let mut bn_nobn = small_sim(Algorithm::FedBN, false, 3);
    avg_nobn.run().unwrap();
    bn_nobn.run().unwrap();
    check(identical(&avg_nobn, &bn_nobn), "FedBN(no BN) == FedAvg");

    // Convex hull of the aggregate.
    let cfg = MlpConfig { input_dim: 6, hidden_widths: vec![8], num_classes: 3, bn_after_hidden: true };
    let sets: Vec<ParamSet<f64>> = (0..5).map(|s| init_mlp(&cfg, s).unwrap()).collect();
    let refs: Vec<&ParamSet<f64>> = sets.iter().collect();
    let mean = aggregate_mean(&refs).unwrap();
    let hull = mean.iter().all(|(n, t)| {
        t.data().iter().enumerate().all(|(j, &v)| {
            let vals: Vec<f64> = sets.iter().map(|s| s.get(n).unwrap().data()[j]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v >= lo - 1e-12 && v <= hi + 1e-12
        })
    });
    check(hull, "convex hull");
    let mut dst = sets[0].clone();
    check(overwrite_blocks(&mut dst, &split_params(&mean, Select::Shared).0).is_ok(), "broadcast merge");

    let detail = if failures.is_empty() { "all 11 invariants hold".to_string() } else { format!("violated: {failures:?}") };
    verdict("A8", failures.is_empty(), &detail);
}

#[test]
fn a9_thread_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(FEATURE_SKEW, &["federation.rounds=10".to_string()]).unwrap();
    let mut files = Vec::new();
    for threads in [1, 4] {
        let out = dir.path().join(threads.to_string());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run(&cfg, &out)).unwrap();
        files.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    verdict("A9", files[0] == files[1], &format!("metrics.csv under 1 and 4 threads identical ({} bytes)", files[0].len()));
}

#[test]
fn a10_eigenvalue_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut interlace, mut concave) = (0, 0);
    let psd = |rng: &mut ChaCha8Rng, n: usize| {
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bm = Tensor::<f64>::from_f64(&[n, n], &b).unwrap();
        bm.matmul(&bm.transpose().unwrap()).unwrap()
    };
    for _ in 0..100 {
        let n = rng.random_range(3..10);
        let a = psd(&mut rng, n);
        let groups = rng.random_range(1..=n);
        let clients: Vec<usize> = (0..n).map(|i| i * groups / n).collect();
        let mask = block_mask::<f64>(&clients);
        let mut d = a.clone();
        d.data_mut().iter_mut().zip(mask.data()).for_each(|(x, m)| *x *= m);
        interlace += usize::from(sym_eig_min(&d).unwrap() >= sym_eig_min(&a).unwrap() - 1e-9);

        let b = psd(&mut rng, n);
        let mut mid = a.clone();
        mid.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = 0.5 * (*x + y));
        let lhs = sym_eig_min(&mid).unwrap();
        let rhs = 0.5 * sym_eig_min(&a).unwrap() + 0.5 * sym_eig_min(&b).unwrap();
        concave += usize::from(lhs >= rhs - 1e-9);
    }
    verdict(
        "A10",
        interlace == 100 && concave == 100,
        &format!("block-diagonal bound {interlace}/100, concavity bound {concave}/100"),
    );
}
