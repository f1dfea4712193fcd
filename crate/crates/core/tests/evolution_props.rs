mod common;

use std::sync::Mutex;

use cgp_nas::catalog::default_catalog;
use cgp_nas::evolution::{budget, evolve, BoxError, BudgetSpec, EvolutionConfig, EvolutionObserver, FitnessRecord};
use cgp_nas::genome::{active_nodes, decode, Genome};
use cgp_nas::shapecheck::{compile, TensorShape};

fn mnist() -> TensorShape {
    TensorShape::spatial(28, 28, 1)
}

fn synthetic(g: &Genome, _seed: u64) -> Result<f64, BoxError> {
    Ok(common::active_fraction(g))
}

/// Checks selection against each record's own numbers.
fn assert_strict_selection(history: &[FitnessRecord]) {
    for (i, r) in history.iter().enumerate() {
        let beat: Vec<usize> = (0..r.offspring_fitness.len())
            .filter(|&k| r.offspring_fitness[k] > r.parent_fitness)
            .collect();
        match r.replaced_by {
            Some(k) => {
                assert!(r.offspring_fitness[k] > r.parent_fitness, "gen {i}");
                let best = beat.iter().map(|&j| r.offspring_fitness[j]).fold(f64::MIN, f64::max);
                assert_eq!(r.offspring_fitness[k], best);
                // lowest index among equals
                assert_eq!(Some(k), beat.iter().copied().find(|&j| r.offspring_fitness[j] == best));
            }
            None => assert!(beat.is_empty(), "gen {i}: {r:?}"),
        }
        if let Some(next) = history.get(i + 1) {
            let expect = r.replaced_by.map_or(r.parent_fitness, |k| r.offspring_fitness[k]);
            assert_eq!(next.parent_fitness, expect, "gen {}", i + 1);
        }
    }
}

#[test]
fn best_so_far_is_monotone_and_selection_is_strict() {
    let catalog = default_catalog();
    let mut improved_runs = 0;
    for seed in 0..100 {
        let cfg = EvolutionConfig::standard(0.1, 50, seed);
        let out = evolve(&cfg, &catalog, &mnist(), &synthetic, &mut ()).unwrap();
        assert_eq!(out.history.len(), 50);
        for w in out.history.windows(2) {
            assert!(w[1].best_so_far >= w[0].best_so_far, "seed {seed}");
        }
        assert_strict_selection(&out.history);
        assert_eq!(out.best_fitness, out.history.last().unwrap().best_so_far);
        assert_eq!(common::active_fraction(&out.best), out.best_fitness);
        if out.best_fitness > out.initial_fitness {
            improved_runs += 1;
        }
    }
    assert!(improved_runs >= 90, "{improved_runs}");
}

#[test]
fn constant_oracle_fires_neutral_mutation_on_schedule() {
    let catalog = default_catalog();
    for threshold in [1, 3, 5] {
        let cfg = EvolutionConfig {
            stagnation_threshold: threshold,
            ..EvolutionConfig::standard(0.1, 25, 7)
        };
        let constant = |_: &Genome, _: u64| -> Result<f64, BoxError> { Ok(0.5) };
        let out = evolve(&cfg, &catalog, &mnist(), &constant, &mut ()).unwrap();
        for r in &out.history {
            assert_eq!(r.replaced_by, None);
            assert_eq!(r.best_so_far, 0.5);
            assert_eq!(r.neutral_mutation_applied, (r.generation + 1) % threshold == 0, "threshold {threshold} gen {}", r.generation);
        }
    }
}

#[test]
fn every_evaluated_genome_is_viable() {
    let catalog = default_catalog();
    let seen = Mutex::new(Vec::new());
    let audit = |g: &Genome, _: u64| -> Result<f64, BoxError> {
        seen.lock().unwrap().push(g.clone());
        Ok(common::active_fraction(g))
    };
    for seed in 0..10 {
        evolve(&EvolutionConfig::standard(0.3, 20, seed), &catalog, &mnist(), &audit, &mut ()).unwrap();
    }
    let seen = seen.into_inner().unwrap();
    assert_eq!(seen.len(), 10 * (1 + 20 * 2));
    for g in &seen {
        assert!(!active_nodes(g).is_empty());
        assert!(compile(&decode(g, &catalog), &mnist()).is_ok());
    }
}

#[test]
fn history_is_a_function_of_the_seed() {
    let catalog = default_catalog();
    let run = |seed| evolve(&EvolutionConfig::standard(0.1, 30, seed), &catalog, &mnist(), &synthetic, &mut ()).unwrap();
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_ne!(a.best.to_text(&catalog) + &format!("{:?}", a.history), c.best.to_text(&catalog) + &format!("{:?}", c.history));
}

#[test]
fn evaluation_seeds_do_not_depend_on_scheduling() {
    // an evaluator that depends only on its seed: results must be reproducible
    let catalog = default_catalog();
    let noisy = |_: &Genome, seed: u64| -> Result<f64, BoxError> { Ok((seed % 1000) as f64 / 1000.0) };
    let cfg = EvolutionConfig::standard(0.1, 15, 9);
    let a = evolve(&cfg, &catalog, &mnist(), &noisy, &mut ()).unwrap();
    let b = evolve(&cfg, &catalog, &mnist(), &noisy, &mut ()).unwrap();
    assert_eq!(a.history, b.history);
    assert_strict_selection(&a.history);
}

#[test]
fn evaluator_errors_carry_the_generation() {
    let catalog = default_catalog();
    let calls = Mutex::new(0usize);
    let flaky = |_: &Genome, _: u64| -> Result<f64, BoxError> {
        let mut n = calls.lock().unwrap();
        *n += 1;
        if *n > 5 {
            Err("boom".into())
        } else {
            Ok(0.1)
        }
    };
    let err = evolve(&EvolutionConfig::standard(0.1, 10, 0), &catalog, &mnist(), &flaky, &mut ()).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("generation 2") && text.contains("boom"), "{text}");
}

#[test]
fn observer_sees_every_generation_and_improvement() {
    #[derive(Default)]
    struct Log {
        gens: usize,
        improvements: Vec<f64>,
    }
    impl EvolutionObserver for Log {
        fn on_improvement(&mut self, _: &Genome, f: f64) -> Result<(), BoxError> {
            self.improvements.push(f);
            Ok(())
        }
        fn on_generation(&mut self, _: &FitnessRecord, _: &Genome) -> Result<(), BoxError> {
            self.gens += 1;
            Ok(())
        }
    }
    let mut log = Log::default();
    let out = evolve(&EvolutionConfig::standard(0.1, 40, 2), &default_catalog(), &mnist(), &synthetic, &mut log).unwrap();
    assert_eq!(log.gens, 40);
    assert_eq!(*log.improvements.last().unwrap(), out.best_fitness);
    assert!(log.improvements.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn standard_budget_and_history_length() {
    let cfg = EvolutionConfig::standard(0.1, 10, 0);
    assert_eq!(budget(&cfg.budget).unwrap(), 25_000);
    assert_eq!(budget(&BudgetSpec::standard(25)).unwrap(), 62_500);
    assert_eq!(budget(&BudgetSpec::standard(50)).unwrap(), 125_000);
    let out = evolve(&cfg, &default_catalog(), &mnist(), &synthetic, &mut ()).unwrap();
    assert_eq!(out.history.len(), 10);
}
