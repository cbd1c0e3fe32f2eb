//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tracksearch::cost::{genome_cost, minimal_genome, space_extrema, Budget, BudgetPreset, Cost};
use tracksearch::evaluator::{
    proxy_tracking_fitness, synthetic_calibration, synthetic_evalset, template_matching_store, SyntheticData,
    SyntheticEvaluator,
};
use tracksearch::evolution::{brute_force, run_search, sample_feasible, SearchConfig, DEFAULT_ENUMERATION_CAP};
use tracksearch::space::*;
use tracksearch::tensor::{forward_tracker, instrumented_macs, normalized_moments, recalibrate_bn, PathStats, Tensor};
use tracksearch::{Execution, WeightStore};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within_limit(o: Outcome, elapsed: Duration, limit: Duration) -> Outcome {
    let detail = format!("{}; {:.2}s (limit {}s)", o.detail, elapsed.as_secs_f64(), limit.as_secs());
    outcome(o.pass && elapsed <= limit, detail)
}

fn timed(limit_secs: u64, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let o = f();
    within_limit(o, t.elapsed(), Duration::from_secs(limit_secs))
}

fn band(x: u64, centre: f64) -> bool {
    (x as f64) >= 0.8 * centre && (x as f64) <= 1.2 * centre
}

fn cardinality() -> Outcome {
    timed(1, || {
        let out = Command::new(env!("CARGO_BIN_EXE_tracksearch")).args(["space", "info"]).output().unwrap();
        if !out.status.success() {
            return outcome(false, "space info failed");
        }
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let backbone = v["backbone_cardinality"].as_u64();
        let head = v["head_cardinality"].as_u64();
        let alt = v["head_cardinality_eight_layer_count"].as_u64();
        outcome(
            backbone == Some(78_364_164_096) && head == Some(172_186_884) && alt == Some(387_420_489),
            format!("backbone {backbone:?}, head {head:?}, eight-layer count {alt:?}"),
        )
    })
}

fn brute_extrema(space: &SpaceDescriptor) -> (Cost, Cost) {
    let costs: Vec<Cost> = space.iter().map(|g| genome_cost(&g).unwrap()).collect();
    let f = |sel: fn(&Cost) -> u64| (costs.iter().map(sel).min().unwrap(), costs.iter().map(sel).max().unwrap());
    let (m, p) = (f(|c| c.macs), f(|c| c.params));
    (Cost::new(m.0, p.0), Cost::new(m.1, p.1))
}

fn extrema() -> Outcome {
    timed(10, || {
        let (lo, hi) = space_extrema(&SpaceDescriptor::full());
        let min_ok = band(lo.macs, 208e6) && band(lo.params, 0.2e6);
        let max_ok = band(hi.macs, 1.4e9) && band(hi.params, 5.4e6);
        let reduced = [
            SpaceDescriptor::singleton(&random_genome(1))
                .unwrap()
                .restrict(0, &[0, 1, 2, 3, 4, 5])
                .unwrap()
                .restrict(OUTPUT_LAYER_GENE, &[0, 2, 5, 7])
                .unwrap()
                .restrict(CLS_GENES, &[0, 1, 2])
                .unwrap()
                .restrict(REG_GENES + 3, &[0, 1, 2])
                .unwrap()
                .restrict(CLS_GENES + 1, &[0, 1])
                .unwrap()
                .restrict(8, &[1, 4])
                .unwrap(),
            SpaceDescriptor::singleton(&random_genome(2))
                .unwrap()
                .restrict(OUTPUT_LAYER_GENE, &[0, 1, 2, 3, 4, 5, 6, 7])
                .unwrap()
                .restrict(13, &[0, 1, 2, 3, 4, 5])
                .unwrap()
                .restrict(REG_GENES, &[0, 1, 2])
                .unwrap()
                .restrict(CLS_GENES + 4, &[0, 1, 2])
                .unwrap(),
        ];
        let reduced_ok = reduced.iter().all(|s| s.cardinality() <= 4096 && space_extrema(s) == brute_extrema(s));
        outcome(
            min_ok && max_ok && reduced_ok,
            format!(
                "min ({} MACs, {} params) {}; max ({} MACs, {} params) {} against (1.4G, 5.4M) +-20%; reduced spaces {}",
                lo.macs,
                lo.params,
                if min_ok { "in band" } else { "OUT OF BAND" },
                hi.macs,
                hi.params,
                if max_ok { "in band" } else { "OUT OF BAND" },
                if reduced_ok { "match enumeration" } else { "MISMATCH" },
            ),
        )
    })
}

fn cost_oracle() -> Outcome {
    timed(300, || {
        let store = WeightStore::init(&SpaceDescriptor::full(), 0);
        let mismatches: Vec<u64> = (0..100)
            .filter(|&s| {
                let g = random_genome(s);
                instrumented_macs(&store.path_view(&g).unwrap()).unwrap() != genome_cost(&g).unwrap().macs
            })
            .collect();
        outcome(mismatches.is_empty(), format!("{} of 100 genomes disagree", mismatches.len()))
    })
}

fn budgets() -> Outcome {
    let space = SpaceDescriptor::full();
    let eval = SyntheticEvaluator::new(4);
    let mut pass = true;
    let mut details = Vec::new();
    for preset in BudgetPreset::ALL {
        let o = timed(300, || {
            let b = preset.budget();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let sampled = sample_feasible(&space, &b, &mut rng, 1000).is_ok();
            let cfg = SearchConfig { budget: b, rng_seed: 1, ..Default::default() };
            let found = run_search(&cfg, &space, &eval, Execution::Parallel).map(|r| r.best.cost.within(&b));
            outcome(sampled && matches!(found, Ok(true)), format!("{}: sample {sampled}, search feasible {found:?}", preset.name()))
        });
        pass &= o.pass;
        details.push(o.detail);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let costs: Vec<Cost> = (0..20_000)
        .map(|_| genome_cost(&sample_feasible(&space, &Budget::MOBILE, &mut rng, 1000).unwrap()).unwrap())
        .collect();
    let bracket = costs.iter().any(|c| c.macs < 530_000_000)
        && costs.iter().any(|c| c.macs > 530_000_000)
        && costs.iter().any(|c| c.params < 1_970_000)
        && costs.iter().any(|c| c.params > 1_970_000);
    details.push(format!("mobile region brackets (530M, 1.97M): {bracket}"));
    outcome(pass && bracket, details.join("; "))
}

fn oracle_equivalence() -> Outcome {
    timed(60, || {
        let mut space = SpaceDescriptor::singleton(&random_genome(9)).unwrap();
        for pos in [1, 6, 12] {
            space = space.restrict(pos, &[0, 2, 5]).unwrap();
        }
        for pos in [CLS_GENES + 3, REG_GENES, REG_GENES + 6] {
            space = space.restrict(pos, &[0, 1, 2]).unwrap();
        }
        let eval = SyntheticEvaluator::new(42);
        let best = brute_force(&space, &eval, &Budget::unlimited(), DEFAULT_ENUMERATION_CAP, Execution::Parallel)
            .unwrap()
            .best
            .genome;
        let (mut hits, mut monotone) = (0, true);
        for seed in 0..20 {
            let r = run_search(&SearchConfig { rng_seed: seed, ..Default::default() }, &space, &eval, Execution::Parallel)
                .unwrap();
            hits += (r.best.genome == best) as usize;
            monotone &= r.history.windows(2).all(|w| w[1].best_fitness >= w[0].best_fitness);
        }
        outcome(
            hits >= 19 && monotone && space.cardinality() <= 729,
            format!("{hits}/20 runs reach the optimum of {} genomes; monotone history {monotone}", space.cardinality()),
        )
    })
}

fn uniformity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let space = SpaceDescriptor::full();
    let mut counts: Vec<Vec<f64>> = (0..GENE_COUNT).map(|p| vec![0.0; full_choice_count(p)]).collect();
    for _ in 0..10_000 {
        for (p, &v) in space.sample(&mut rng).genes().iter().enumerate() {
            counts[p][v as usize] += 1.0;
        }
    }
    let min_p = counts
        .iter()
        .map(|c| {
            let e = 10_000.0 / c.len() as f64;
            let stat: f64 = c.iter().map(|o| (o - e).powi(2) / e).sum();
            1.0 - ChiSquared::new(c.len() as f64 - 1.0).unwrap().cdf(stat)
        })
        .fold(1.0, f64::min);
    outcome(min_p > 0.001, format!("smallest per-gene p-value {min_p:.4}"))
}

fn shapes() -> Outcome {
    timed(120, || {
        let store = WeightStore::init(&SpaceDescriptor::full(), 1);
        let pair = &synthetic_calibration(&SyntheticData { seed: 7, count: 1, snr: 4.0 })[0];
        let bad = (0..200)
            .filter(|&s| {
                let view = store.path_view(&random_genome(10_000 + s)).unwrap();
                let out = forward_tracker(&view, &PathStats::unit(), &pair.exemplar, &pair.search).unwrap();
                out.cls.shape() != (16, 16, 1) || out.reg.shape() != (16, 16, 4)
            })
            .count();
        outcome(bad == 0, format!("{bad} of 200 genomes produce wrong output shapes"))
    })
}

fn stem_moments(calib: &[tracksearch::tensor::InputPair], w: &[f32]) -> Vec<(f64, f64)> {
    let cout = w.len() / 27;
    let mut acc = vec![Vec::new(); cout];
    let imgs: Vec<&Tensor> = calib.iter().flat_map(|p| [&p.search, &p.exemplar]).collect();
    for img in imgs {
        let (h, wd, _) = img.shape();
        for oy in 0..h / 2 {
            for ox in 0..wd / 2 {
                for (co, a) in acc.iter_mut().enumerate() {
                    let mut s = 0.0f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                for ci in 0..3 {
                                    s += img.at(iy as usize, ix as usize, ci) as f64
                                        * w[((ky * 3 + kx) * 3 + ci) * cout + co] as f64;
                                }
                            }
                        }
                    }
                    a.push(s);
                }
            }
        }
    }
    acc.iter()
        .map(|xs| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
        })
        .collect()
}

fn recalibration() -> Outcome {
    let store = WeightStore::init(&SpaceDescriptor::full(), 2);
    let calib = synthetic_calibration(&SyntheticData { seed: 3, count: 2, snr: 4.0 });
    let view = store.path_view(&minimal_genome()).unwrap();
    let stats = recalibrate_bn(&view, &calib).unwrap();
    let hand = stem_moments(&calib, view.layer("stem").unwrap().get("w").unwrap());
    let s = stats.get("stem.bn").unwrap();
    let hand_err = hand
        .iter()
        .enumerate()
        .map(|(c, (m, v))| (s.mean[c] - m).abs().max((s.var[c] - v).abs()))
        .fold(0.0, f64::max);
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for g in [minimal_genome(), random_genome(77)] {
        let view = store.path_view(&g).unwrap();
        let stats = recalibrate_bn(&view, &calib).unwrap();
        for m in normalized_moments(&view, &stats, &calib).unwrap().values() {
            mean_err = m.mean.iter().map(|x| x.abs()).fold(mean_err, f64::max);
            var_err = m.var.iter().map(|x| (x - 1.0).abs()).fold(var_err, f64::max);
        }
    }
    outcome(
        hand_err <= 1e-6 && mean_err <= 1e-4 && var_err <= 1e-4,
        format!("hand-moment error {hand_err:.2e}; renormalized |mean| {mean_err:.2e}, |var-1| {var_err:.2e}"),
    )
}

fn proxy() -> Outcome {
    let space = SpaceDescriptor::full();
    let calib = synthetic_calibration(&SyntheticData { seed: 20, count: 2, snr: 4.0 });
    let planted = synthetic_evalset(&SyntheticData { seed: 21, count: 16, snr: 4.0 });
    let oracle = template_matching_store(&space, 5).unwrap();
    let g = minimal_genome();
    let exact = proxy_tracking_fitness(&g, &oracle, &calib, &planted, Execution::Parallel).unwrap();
    let random = WeightStore::init(&space, 5);
    let set = synthetic_evalset(&SyntheticData { seed: 22, count: 200, snr: 4.0 });
    let chance = proxy_tracking_fitness(&g, &random, &calib, &set, Execution::Parallel).unwrap();
    let p = 1.0 / 256.0;
    let sigma = (p * (1.0 - p) / 200.0f64).sqrt();
    outcome(
        exact == 1.0 && (chance - p).abs() <= 3.0 * sigma,
        format!("oracle store {exact}; random store {chance:.4} (chance {p:.4}, 3 sigma {:.4})", 3.0 * sigma),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("cardinality", cardinality),
        ("space extrema", extrema),
        ("cost oracle equality", cost_oracle),
        ("budget presets", budgets),
        ("oracle equivalence", oracle_equivalence),
        ("sampling uniformity", uniformity),
        ("shape contract", shapes),
        ("normalization recalibration", recalibration),
        ("proxy pipeline", proxy),
    ];
    let mut failed = Vec::new();
    let _ = writeln!(std::io::stdout().lock());
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let line = format!("criterion {} ({name}): {} | {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
