//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `SDBC_ACCEPTANCE_ONLY=1,2,3` restricts the run to the listed criteria and
//! `SDBC_ACCEPTANCE_DIR` keeps the desk-scale run directories there.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdbc_core::analysis::{mann_whitney_u, SomParams};
use sdbc_core::evolution::controller::Genome;
use sdbc_core::evolution::{EvolutionConfig, Evolver, GaParams, Method, NoveltyParams, SdbcParams};
use sdbc_core::experiment::{
    analyze_runs, load_run, run_experiment, run_single, AnalyzeOptions, ExperimentConfig, RunData,
    TaskAnalysis,
};
use sdbc_core::formalism::{
    group_dispersion, group_mean_state, group_pair_distance, group_size_feature, DistanceFunction,
    EntityGroup, EntityRef, EntityState, GroupDecl,
};
use sdbc_core::geometry::Vec2;
use sdbc_core::novelty::{
    crowding_distance, dominates, non_dominated_sort, novelty_score, update_archive,
    NoveltyArchive, ScoredIndividual,
};
use sdbc_core::sdbc::{
    apply_standardisation, apply_weights, behaviour_distance, compute_standardisation,
    compute_weights, estimate_mutual_information, FeatureWeights, MiBins,
};
use sdbc_core::simcore::{max_overlap, resolve_collisions, Arena, RobotBody};
use sdbc_core::tasks::{
    build_task, gate_fitness, pursuit_fitness, sharing_fitness, TaskKind, TaskParams,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{what}: got {got}, want {want}")
    })
}

fn euclid(a: EntityRef<'_>, b: EntityRef<'_>) -> f64 {
    a.theta
        .iter()
        .zip(b.theta)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn group(index: usize, decl: &GroupDecl, points: &[&[f64]]) -> EntityGroup {
    let states: Vec<EntityState> = points
        .iter()
        .map(|p| EntityState::new(p.to_vec(), vec![]))
        .collect();
    EntityGroup::with_entities(index, decl, &states).expect("valid group")
}

fn criterion_1() -> Outcome {
    let mut parts = Vec::new();
    for (kind, features, len) in [
        (TaskKind::GateEscape, 10, 21),
        (TaskKind::ResourceSharing, 10, 21),
        (TaskKind::PredatorPrey, 13, 27),
    ] {
        let task = build_task(kind, &TaskParams::default()).map_err(|e| e.to_string())?;
        let f = task.layout().feature_count();
        let l = task.schema().len();
        ensure(f == features && l == len, || {
            format!("{kind}: {f} features / length {l}")
        })?;
        parts.push(format!("{kind} {f}/{l}"));
    }
    let lone = GroupDecl::new("lone", &[], 1, 1);
    let layout =
        sdbc_core::formalism::StateLayout::new(vec![lone], &[]).map_err(|e| e.to_string())?;
    ensure(layout.feature_count() == 0, || {
        "stateless singleton yields features".into()
    })?;
    Ok(parts.join(", "))
}

fn criterion_2() -> Outcome {
    const T: f64 = 1e-12;
    let f: &dyn DistanceFunction = &euclid;
    let five = GroupDecl::new("g", &["x"], 0, 5);
    close(
        "size min",
        group_size_feature(&group(0, &five, &[])).unwrap(),
        0.0,
        T,
    )?;
    let p: Vec<[f64; 1]> = (0..5).map(|i| [i as f64]).collect();
    let refs: Vec<&[f64]> = p.iter().map(|x| x.as_slice()).collect();
    close(
        "size max",
        group_size_feature(&group(0, &five, &refs)).unwrap(),
        1.0,
        T,
    )?;
    close(
        "size 3/5",
        group_size_feature(&group(0, &five, &refs[..3])).unwrap(),
        0.6,
        T,
    )?;

    let two = GroupDecl::new("g", &["a", "b"], 0, 4);
    let m = group_mean_state(&group(0, &two, &[&[0.2, 7.0]])).unwrap();
    close("mean single a", m[0], 0.2, T)?;
    close("mean single b", m[1], 7.0, T)?;
    let m = group_mean_state(&group(0, &two, &[&[0.0, 2.0], &[2.0, 4.0]])).unwrap();
    close("mean pair a", m[0], 1.0, T)?;
    close("mean pair b", m[1], 3.0, T)?;

    let pts = GroupDecl::new("p", &["x", "y"], 0, 4);
    close(
        "dispersion pair",
        group_dispersion(&group(0, &pts, &[&[0.0, 0.0], &[4.0, 0.0]]), f).unwrap(),
        8.0,
        T,
    )?;
    let tri = group(
        0,
        &pts,
        &[&[0.0, 0.0], &[1.0, 0.0], &[0.5, 3f64.sqrt() / 2.0]],
    );
    close(
        "dispersion triangle",
        group_dispersion(&tri, f).unwrap(),
        1.5,
        T,
    )?;
    close(
        "dispersion identical",
        group_dispersion(&group(0, &pts, &[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]), f).unwrap(),
        0.0,
        T,
    )?;

    let a1 = group(0, &pts, &[&[0.0, 0.0]]);
    let b1 = group(1, &pts, &[&[3.5, 0.0]]);
    close(
        "pair singletons",
        group_pair_distance(&a1, &b1, f).unwrap(),
        3.5,
        T,
    )?;
    let a2 = group(0, &pts, &[&[0.0, 0.0], &[2.0, 0.0]]);
    let b2 = group(1, &pts, &[&[4.0, 0.0]]);
    close(
        "pair 2x1",
        group_pair_distance(&a2, &b2, f).unwrap(),
        3.0,
        T,
    )?;

    close("gate worst", gate_fitness(0, 0, 500, 4), 0.0, T)?;
    close("gate best", gate_fitness(4, 500, 500, 4), 1.0, T)?;
    close("gate mid", gate_fitness(2, 250, 500, 4), 0.5, T)?;
    close("sharing worst", sharing_fitness(0, 0.0, 100.0, 4), 0.0, T)?;
    close("sharing best", sharing_fitness(4, 100.0, 100.0, 4), 1.0, T)?;
    close("sharing mid", sharing_fitness(3, 50.0, 100.0, 4), 0.7, T)?;
    close(
        "pursuit capture",
        pursuit_fitness(true, 300, 600, 1.0, 0.0, 8.0),
        1.5,
        T,
    )?;
    close(
        "pursuit clamp",
        pursuit_fitness(false, 600, 600, 1.0, 2.0, 8.0),
        0.0,
        T,
    )?;
    close(
        "pursuit approach",
        pursuit_fitness(false, 600, 600, 3.0, 1.0, 8.0),
        0.25,
        T,
    )?;

    let c = compute_standardisation(&[vec![0.0], vec![2.0]]).unwrap();
    close("mu", c.mu[0], 1.0, T)?;
    close("sigma", c.sigma[0], 1.0, T)?;
    let c = compute_standardisation(&[vec![1.0, 5.0], vec![1.0, 5.0]]).unwrap();
    ensure(c.sigma.iter().all(|&s| s == 0.0), || {
        "identical population sigma".into()
    })?;
    let c2 = sdbc_core::sdbc::StandardisationCoefficients {
        mu: vec![1.0],
        sigma: vec![2.0],
    };
    close(
        "standardise",
        apply_standardisation(&[3.0], &c2).unwrap()[0],
        1.0,
        T,
    )?;
    close(
        "centred",
        apply_standardisation(&[1.0], &c2).unwrap()[0],
        0.0,
        T,
    )?;

    let w = FeatureWeights::from_mi(vec![0.0, 0.75], 0.25);
    close("weight mi 0", w.weights[0], 0.25, T)?;
    close("weight mi 0.75", w.weights[1], 1.0, T)?;
    let constant = compute_weights(
        &[vec![2.0], vec![2.0], vec![2.0], vec![2.0]],
        &[0.1, 0.5, 0.9, 0.3],
        0.25,
        MiBins::Auto,
    )
    .unwrap();
    close("constant feature weight", constant.weights[0], 0.25, T)?;
    let b = [0.3, -1.2, 4.0];
    ensure(
        apply_weights(&b, &FeatureWeights::uniform(3)).unwrap() == b,
        || "uniform weights".into(),
    )?;
    ensure(
        apply_weights(
            &[0.0; 3],
            &FeatureWeights::from_mi(vec![0.2, 0.4, 1.0], 0.25),
        )
        .unwrap()
            == [0.0; 3],
        || "zero vector".into(),
    )?;
    close(
        "3-4-5",
        behaviour_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
        5.0,
        T,
    )?;

    let fronts = non_dominated_sort(&[(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    ensure(fronts == vec![vec![2], vec![0, 1]], || {
        format!("fronts {fronts:?}")
    })?;
    let cd = crowding_distance(&[(0.0, 2.0), (1.0, 1.0), (2.0, 0.0)]);
    close("crowding middle", cd[1], 2.0, T)?;
    ensure(
        crowding_distance(&[(0.0, 1.0), (1.0, 0.0)])
            .iter()
            .all(|d| d.is_infinite()),
        || "front of two".into(),
    )?;
    let mw = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    close("mann-whitney U", mw.u, 0.0, T)?;
    close("mann-whitney p", mw.p_two_sided, 0.1, T)?;
    Ok("all hand-evaluated examples match to 1e-12".into())
}

fn knn_oracle(target: &[f64], pool: &[Vec<f64>], k: usize) -> f64 {
    let mut d: Vec<f64> = pool
        .iter()
        .map(|p| {
            p.iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let k = k.min(d.len());
    d[..k].iter().sum::<f64>() / k as f64
}

fn fronts_oracle(points: &[(f64, f64)]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| dominates(points[j], points[i])))
            .collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

fn crowding_oracle(front: &[(f64, f64)]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut out = vec![0.0; n];
    for obj in 0..2 {
        let v = |i: usize| if obj == 0 { front[i].0 } else { front[i].1 };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| v(a).partial_cmp(&v(b)).unwrap().then(a.cmp(&b)));
        let range = v(idx[n - 1]) - v(idx[0]);
        out[idx[0]] = f64::INFINITY;
        out[idx[n - 1]] = f64::INFINITY;
        for w in 1..n - 1 {
            if range > 0.0 {
                out[idx[w]] += (v(idx[w + 1]) - v(idx[w - 1])) / range;
            }
        }
    }
    out
}

fn mi_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let b = ((n as f64).sqrt().ceil() as usize).clamp(4, 16);
    let bin = |v: &[f64], i: usize| {
        let below = v.iter().filter(|&&o| o < v[i]).count();
        (below * b / n).min(b - 1)
    };
    let mut joint = vec![vec![0.0; b]; b];
    for i in 0..n {
        joint[bin(x, i)][bin(y, i)] += 1.0 / n as f64;
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..b).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..b {
        for j in 0..b {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (px[i] * py[j])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// U by pair counting and exact tail probabilities by enumerating every split of the pooled sample.
fn mann_whitney_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let u_of = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| {
                        if p > q {
                            1.0
                        } else if p == q {
                            0.5
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let u = u_of(a, b);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mean = (a.len() * b.len()) as f64 / 2.0;
    let (mut total, mut ge, mut extreme) = (0.0, 0.0, 0.0);
    let mut chosen = Vec::new();
    fn walk(
        start: usize,
        need: usize,
        pooled: &[f64],
        chosen: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if need == 0 {
            visit(chosen);
            return;
        }
        for i in start..=pooled.len() - need {
            chosen.push(i);
            walk(i + 1, need - 1, pooled, chosen, visit);
            chosen.pop();
        }
    }
    walk(0, a.len(), &pooled, &mut chosen, &mut |idx| {
        let x: Vec<f64> = idx.iter().map(|&i| pooled[i]).collect();
        let y: Vec<f64> = (0..pooled.len())
            .filter(|i| !idx.contains(i))
            .map(|i| pooled[i])
            .collect();
        let uu = u_of(&x, &y);
        total += 1.0;
        if uu >= u - 1e-9 {
            ge += 1.0;
        }
        if (uu - mean).abs() >= (u - mean).abs() - 1e-9 {
            extreme += 1.0;
        }
    });
    (u, ge / total, extreme / total)
}

fn criterion_3() -> Outcome {
    const N: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..N {
        let dim = rng.gen_range(1..5);
        let pop_n = rng.gen_range(2..20);
        let arch_n = rng.gen_range(0..25);
        let k = rng.gen_range(1..18);
        let v = |r: &mut ChaCha8Rng| {
            (0..dim)
                .map(|_| r.gen_range(-2.0..2.0))
                .collect::<Vec<f64>>()
        };
        let pop: Vec<ScoredIndividual> = (0..pop_n)
            .map(|i| ScoredIndividual {
                id: i as u64,
                fitness: 0.0,
                characterisation: v(&mut rng),
                novelty: 0.0,
            })
            .collect();
        let archive: Vec<Vec<f64>> = (0..arch_n).map(|_| v(&mut rng)).collect();
        let t = &pop[0];
        let got = novelty_score(t, &pop, &archive, k).map_err(|e| e.to_string())?;
        let pool: Vec<Vec<f64>> = pop[1..]
            .iter()
            .map(|p| p.characterisation.clone())
            .chain(archive)
            .collect();
        close(
            &format!("knn case {case}"),
            got,
            knn_oracle(&t.characterisation, &pool, k),
            1e-12,
        )?;
    }
    for case in 0..N {
        let n = rng.gen_range(1..40);
        // coarse grid so ties and duplicates are common
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64))
            .collect();
        let got = non_dominated_sort(&pts);
        let want = fronts_oracle(&pts);
        ensure(got == want, || {
            format!("nds case {case}: {got:?} vs {want:?}")
        })?;
        for front in &got {
            let members: Vec<(f64, f64)> = front.iter().map(|&i| pts[i]).collect();
            let a = crowding_distance(&members);
            let b = crowding_oracle(&members);
            for (x, y) in a.iter().zip(&b) {
                ensure(x == y || (x - y).abs() < 1e-12, || {
                    format!("crowding case {case}: {a:?} vs {b:?}")
                })?;
            }
        }
    }
    for case in 0..N {
        let n = rng.gen_range(2..120);
        let levels = rng.gen_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                if rng.gen_bool(0.5) {
                    *v
                } else {
                    rng.gen_range(0.0..10.0)
                }
            })
            .collect();
        let got = estimate_mutual_information(&x, &y).map_err(|e| e.to_string())?;
        close(&format!("mi case {case}"), got, mi_oracle(&x, &y), 1e-9)?;
    }
    for case in 0..N {
        let na = rng.gen_range(1..7);
        let nb = rng.gen_range(1..7);
        let mut draw = |n| {
            (0..n)
                .map(|_| rng.gen_range(0..8) as f64)
                .collect::<Vec<f64>>()
        };
        let (a, b) = (draw(na), draw(nb));
        let got = mann_whitney_u(&a, &b).map_err(|e| e.to_string())?;
        let (u, p_greater, p_two) = mann_whitney_oracle(&a, &b);
        close(&format!("mw U case {case}"), got.u, u, 1e-9)?;
        close(
            &format!("mw p> case {case}"),
            got.p_greater,
            p_greater,
            1e-12,
        )?;
        close(&format!("mw p2 case {case}"), got.p_two_sided, p_two, 1e-12)?;
    }
    Ok(format!(
        "{N} instances each for k-NN, sorting, crowding, MI, Mann-Whitney"
    ))
}

fn prop(name: &str, r: Result<(), TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

fn criterion_4() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        failure_persistence: None,
        ..Config::default()
    });
    let vec3 = || prop::collection::vec(-100.0f64..100.0, 6);
    let r = runner.run(&(vec3(), vec3(), vec3()), |(a, b, c)| {
        let ab = behaviour_distance(&a, &b).unwrap();
        prop_assert_eq!(behaviour_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, behaviour_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!(
            ab <= behaviour_distance(&a, &c).unwrap() + behaviour_distance(&c, &b).unwrap() + 1e-9
        );
        Ok(())
    });
    prop("metric axioms", r)?;

    let population = prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 2..60);
    let r = runner.run(&population, |pop| {
        let c = compute_standardisation(&pop).unwrap();
        let z: Vec<Vec<f64>> = pop
            .iter()
            .map(|b| apply_standardisation(b, &c).unwrap())
            .collect();
        let n = z.len() as f64;
        for k in 0..5 {
            let mean = z.iter().map(|v| v[k]).sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9, "mean {}", mean);
            if c.sigma[k] > 1e-9 * c.mu[k].abs().max(1.0) {
                prop_assert!((sd - 1.0).abs() < 1e-9, "sd {}", sd);
            }
        }
        Ok(())
    });
    prop("standardisation", r)?;

    let weighted = (
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..80),
        0.0f64..1.0,
    );
    let r = runner.run(&weighted, |(pop, delta)| {
        let fit: Vec<f64> = pop.iter().map(|b| b[0] * b[0] + b[1]).collect();
        let w = compute_weights(&pop, &fit, delta, MiBins::Auto).unwrap();
        prop_assert!(w.weights.iter().all(|&x| x >= delta));
        Ok(())
    });
    prop("weights >= delta", r)?;

    // 250 generations of 100 individuals at rate 0.025: mean 625, sd ~24.7
    let r = runner.run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = NoveltyArchive::new();
        let pop: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        for g in 0..250 {
            update_archive(
                &mut archive,
                pop.iter().map(|v| v.as_slice()),
                g,
                &mut rng,
                0.025,
            );
        }
        let sd = (25_000.0f64 * 0.025 * 0.975).sqrt();
        prop_assert!(
            (archive.len() as f64 - 625.0).abs() <= 3.0 * sd + 1e-9,
            "len {}",
            archive.len()
        );
        Ok(())
    });
    prop("archive growth", r)?;

    let clusters = prop::collection::vec((0.2f64..0.8, 0.2f64..0.8), 2..12);
    let r = runner.run(&clusters, |pts| {
        let arena = Arena::rectangle(1.0, 1.0);
        let mut bodies: Vec<RobotBody> = pts
            .iter()
            .map(|&(x, y)| RobotBody::new(Vec2::new(x, y), 0.0, 0.06))
            .collect();
        resolve_collisions(&mut bodies, &arena.walls);
        prop_assert!(max_overlap(&bodies, &arena.walls) < 1e-6);
        Ok(())
    });
    prop("no interpenetration", r)?;

    let mut small = TestRunner::new(Config {
        cases: 12,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        failure_persistence: None,
        ..Config::default()
    });
    let kinds = prop::sample::select(TaskKind::ALL.to_vec());
    let r = small.run(
        &(kinds, any::<u64>(), prop::collection::vec(-2.0f64..2.0, 72)),
        |(kind, seed, genes)| {
            let task = build_task(kind, &TaskParams::default()).unwrap();
            let spec = task.controller_spec(8);
            let genome = Genome(genes.into_iter().cycle().take(spec.genome_len()).collect());
            let mut c1 = sdbc_core::evolution::controller::build_controller(&genome, spec).unwrap();
            let mut c2 = sdbc_core::evolution::controller::build_controller(&genome, spec).unwrap();
            let a = task.run_trial(&mut c1, seed, None).unwrap();
            let b = task.run_trial(&mut c2, seed, None).unwrap();
            prop_assert_eq!(a, b);
            Ok(())
        },
    );
    prop("simulator determinism", r)?;

    let r = small.run(
        &(any::<u64>(), prop::sample::select(Method::ALL.to_vec())),
        |(seed, method)| {
            let mut tp = TaskParams::default();
            tp.resource_sharing.max_steps = 80;
            let task = build_task(TaskKind::ResourceSharing, &tp).unwrap();
            let config = EvolutionConfig {
                method,
                seed,
                ga: GaParams {
                    population: 10,
                    generations: 8,
                    trials: 2,
                    elites: 1,
                    ..GaParams::default()
                },
                novelty: NoveltyParams {
                    k: 4,
                    ..NoveltyParams::default()
                },
                sdbc: SdbcParams {
                    weight_update_period: 2,
                    ..SdbcParams::default()
                },
            };
            let evolver = Evolver::new(task, config).unwrap();
            let mut state = evolver.init().unwrap();
            let mut last = f64::NEG_INFINITY;
            while !evolver.is_finished(&state) {
                let report = evolver.run_generation(&mut state).unwrap();
                prop_assert!(report.best_so_far >= last);
                last = report.best_so_far;
            }
            Ok(())
        },
    );
    prop("monotone best-so-far", r)?;

    Ok("metric, standardisation, weights, archive, collisions, determinism, elitism".into())
}

struct Desk {
    root: PathBuf,
    sharing: TaskAnalysis,
    gate: TaskAnalysis,
    first_run: ExperimentConfig,
}

const DESK_RUNS: usize = 8;
const GATE_RUNS: usize = 4;

fn desk_config(root: &Path, task: TaskKind, method: Method, runs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        task,
        method,
        seed: 1,
        runs,
        output: root.join(task.as_str()),
        ..ExperimentConfig::default()
    };
    c.ga.population = 50;
    c.ga.generations = 60;
    c.ga.trials = 10;
    c
}

fn run_desk() -> Result<Desk, String> {
    let root = match std::env::var_os("SDBC_ACCEPTANCE_DIR") {
        Some(d) => PathBuf::from(d),
        None => {
            let d = std::env::temp_dir().join(format!("sdbc-acceptance-{}", std::process::id()));
            let _ = std::fs::remove_dir_all(&d);
            d
        }
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sharing_runs: Vec<RunData> = Vec::new();
    for method in Method::ALL {
        let c = desk_config(&root, TaskKind::ResourceSharing, method, DESK_RUNS);
        let started = Instant::now();
        for s in run_experiment(&c, threads).map_err(|e| e.to_string())? {
            sharing_runs.push(load_run(&s.dir).map_err(|e| e.to_string())?);
        }
        eprintln!(
            "  desk: resource-sharing {method} x{DESK_RUNS} in {:.0?}",
            started.elapsed()
        );
    }
    let c = desk_config(&root, TaskKind::GateEscape, Method::NsSdPlus, GATE_RUNS);
    let started = Instant::now();
    let mut gate_runs = Vec::new();
    for s in run_experiment(&c, threads).map_err(|e| e.to_string())? {
        gate_runs.push(load_run(&s.dir).map_err(|e| e.to_string())?);
    }
    eprintln!(
        "  desk: gate-escape ns-sd+ x{GATE_RUNS} in {:.0?}",
        started.elapsed()
    );

    let options = AnalyzeOptions {
        som: SomParams::default(),
        ..AnalyzeOptions::default()
    };
    let started = Instant::now();
    let sharing = analyze_runs(&sharing_runs, &options, Some(&root.join("analysis")))
        .map_err(|e| e.to_string())?
        .remove(0);
    let gate = analyze_runs(&gate_runs, &options, Some(&root.join("analysis-gate")))
        .map_err(|e| e.to_string())?
        .remove(0);
    eprintln!("  desk: analysis in {:.0?}", started.elapsed());
    Ok(Desk {
        root: root.clone(),
        sharing,
        gate,
        first_run: desk_config(&root, TaskKind::ResourceSharing, Method::Fit, 1),
    })
}

fn criterion_5(desk: &Desk) -> Outcome {
    let t = &desk.sharing;
    let fit = t.median_best(Method::Fit).ok_or("no fit runs")?;
    let mut parts = vec![format!("median Fit {fit:.4}")];
    let mut failed = Vec::new();
    for m in [Method::NsTs, Method::NsSd, Method::NsSdPlus] {
        let med = t.median_best(m).ok_or_else(|| format!("no {m} runs"))?;
        parts.push(format!("{m} {med:.4}"));
        if med <= fit {
            failed.push(format!("{m} median not above Fit"));
        }
    }
    let mw =
        mann_whitney_u(&t.best[&Method::NsSd], &t.best[&Method::Fit]).map_err(|e| e.to_string())?;
    parts.push(format!("NS-SD>Fit p={:.4}", mw.p_greater));
    if mw.p_greater >= 0.05 {
        failed.push("NS-SD vs Fit one-sided p >= 0.05".into());
    }
    let summary = parts.join(", ");
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failed.join("; ")))
    }
}

fn rank_of(t: &TaskAnalysis, name: &str) -> Result<usize, String> {
    let table = t
        .mi_tables
        .get(&Method::NsSdPlus)
        .ok_or("no ns-sd+ MI table")?;
    table
        .iter()
        .position(|r| r.feature == name)
        .map(|i| i + 1)
        .ok_or_else(|| format!("feature `{name}` missing"))
}

fn criterion_6(desk: &Desk) -> Outcome {
    let checks = [
        (&desk.gate, "gate closing (F)"),
        (&desk.gate, "robots group size (F)"),
        (&desk.sharing, "robots energy (M)"),
        (&desk.sharing, "robots group size (F)"),
    ];
    let mut parts = Vec::new();
    let mut failed = false;
    for (t, name) in checks {
        let r = rank_of(t, name)?;
        failed |= r > 3;
        parts.push(format!("{} `{name}` #{r}", t.task));
    }
    let summary = parts.join(", ");
    if failed {
        Err(summary)
    } else {
        Ok(summary)
    }
}

fn criterion_7(desk: &Desk) -> Outcome {
    let t = &desk.sharing;
    let d = &t.density;
    let fit = t.method_index(Method::Fit).ok_or("fit missing from map")?;
    let conc = d.concentration(fit, 0.5);
    let fit_cells = d.non_empty_cells(fit);
    let mut parts = vec![format!(
        "Fit: 50% of samples in {:.0}% of cells, {fit_cells} non-empty",
        conc * 100.0
    )];
    let mut failed = conc > 0.25;
    for m in [Method::NsTs, Method::NsSd, Method::NsSdPlus] {
        let i = t
            .method_index(m)
            .ok_or_else(|| format!("{m} missing from map"))?;
        let cells = d.non_empty_cells(i);
        failed |= cells <= fit_cells;
        parts.push(format!("{m} {cells}"));
    }
    let summary = parts.join(", ");
    if failed {
        Err(summary)
    } else {
        Ok(summary)
    }
}

fn criterion_8(desk: &Desk) -> Outcome {
    let original = desk.first_run.run_dir(desk.first_run.seed);
    let repeat = desk.root.join("repeat").join(original.file_name().unwrap());
    let _ = std::fs::remove_dir_all(&repeat);
    run_single(&desk.first_run, &repeat).map_err(|e| e.to_string())?;
    let a = std::fs::read(original.join("log.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(repeat.join("log.csv")).map_err(|e| e.to_string())?;
    ensure(a == b, || "generation logs differ".into())?;
    Ok(format!("log.csv identical ({} bytes)", a.len()))
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("SDBC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|s| s.contains(&i));
    let mut lines = Vec::new();
    let mut record = |i: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(d) => format!("PASS criterion {i} ({name}): {d} [{secs:.1}s]"),
            Err(d) => format!("FAIL criterion {i} ({name}): {d} [{secs:.1}s]"),
        };
        println!("{line}");
        lines.push(line);
    };
    let quick: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "schema fidelity", criterion_1),
        (2, "formula goldens", criterion_2),
        (3, "oracle equivalence", criterion_3),
        (4, "property suites", criterion_4),
    ];
    for (i, name, f) in quick {
        if wanted(i) {
            let started = Instant::now();
            let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            record(i, name, started, outcome);
        }
    }
    let desk_criteria: [(usize, &str, fn(&Desk) -> Outcome); 4] = [
        (5, "desk-scale method comparison", criterion_5),
        (6, "MI relevance ranking", criterion_6),
        (7, "exploration map", criterion_7),
        (8, "reproducibility", criterion_8),
    ];
    if desk_criteria.iter().any(|(i, _, _)| wanted(*i)) {
        let started = Instant::now();
        match run_desk() {
            Ok(desk) => {
                eprintln!("  desk stage took {:.0?}", started.elapsed());
                for (i, name, f) in desk_criteria {
                    if wanted(i) {
                        let started = Instant::now();
                        record(i, name, started, f(&desk));
                    }
                }
            }
            Err(e) => {
                for (i, name, _) in desk_criteria {
                    if wanted(i) {
                        record(i, name, started, Err(format!("desk runs failed: {e}")));
                    }
                }
            }
        }
    }
    if lines.iter().all(|l| l.starts_with("PASS")) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
