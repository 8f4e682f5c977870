//! Description-phase initialization (random description subsets, keep the
//! best) and selection of the class groups whose descriptions get searched.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::PromptLibrary;
use crate::scoring::{predict, CandidatePrompt, Evaluator, Objective};
use crate::search::Member;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Random initial candidates drawn besides the seed.
    pub t_sample: usize,
    /// Largest per-class description subset drawn at init.
    pub k_max: usize,
    /// Lowest-accuracy anchors; `None` picks [`default_group_count`].
    pub n_wst: Option<usize>,
    /// Highest-gain anchors; `None` picks [`default_group_count`].
    pub n_sln: Option<usize>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            t_sample: 32,
            k_max: 5,
            n_wst: None,
            n_sln: None,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be >= 1".into()));
        }
        Ok(())
    }

    /// (n_wst, n_sln) with defaults resolved for `n_classes`.
    pub fn group_counts(&self, n_classes: usize) -> (usize, usize) {
        let d = default_group_count(n_classes);
        (self.n_wst.unwrap_or(d), self.n_sln.unwrap_or(d))
    }
}

/// max(2, ceil(log10(n_classes))).
pub fn default_group_count(n_classes: usize) -> usize {
    let mut digits = 0;
    let mut p = 1usize;
    while p < n_classes {
        p = p.saturating_mul(10);
        digits += 1;
    }
    digits.max(2)
}

/// Per-class description pools. Fails when a class has descriptions in the
/// library but none of them is bound.
pub fn description_pools(
    library: &PromptLibrary,
    integration: Option<&BTreeSet<usize>>,
    templates: &BTreeSet<usize>,
    synonyms_in_templates: bool,
) -> Result<Vec<Vec<usize>>> {
    (0..library.n_classes())
        .map(|c| {
            let pool = library.description_pool(c, integration, templates, synonyms_in_templates);
            if pool.is_empty() && !library.descriptions(c).is_empty() {
                Err(Error::UnboundDescriptions(c))
            } else {
                Ok(pool)
            }
        })
        .collect()
}

/// Draws one description assignment: per class a uniform subset of its pool
/// with size uniform in [1, min(k_max, pool size)].
pub fn random_assignment(
    base: &CandidatePrompt,
    pools: &[Vec<usize>],
    k_max: usize,
    rng: &mut impl Rng,
) -> CandidatePrompt {
    let mut cand = base.clone();
    for (c, pool) in pools.iter().enumerate() {
        cand.desc_ids[c] = if pool.is_empty() {
            BTreeSet::new()
        } else {
            let size = rng.random_range(1..=k_max.min(pool.len()));
            sample(rng, pool.len(), size).into_iter().map(|i| pool[i]).collect()
        };
    }
    cand
}

/// Scores `t_sample` random assignments built on `seed` and returns the best
/// member of {seed} ∪ samples (ties to the earliest) together with every
/// newly scored sample. Samples are tagged from `first_tag` upward.
pub fn prompt_sample_init<O: Objective + ?Sized>(
    objective: &O,
    seed: &Member,
    pools: &[Vec<usize>],
    cfg: &SamplingConfig,
    first_tag: u64,
    rng: &mut impl Rng,
) -> Result<(Member, Vec<Member>)> {
    cfg.validate()?;
    if pools.len() != seed.candidate.n_classes() {
        return Err(Error::Config(format!(
            "{} description pools for {} classes",
            pools.len(),
            seed.candidate.n_classes()
        )));
    }
    let drawn: Vec<CandidatePrompt> = (0..cfg.t_sample)
        .map(|i| random_assignment(&seed.candidate, pools, cfg.k_max, rng).with_tag(first_tag + i as u64))
        .collect();
    let scores = objective.evaluate_batch(&drawn)?;
    let scored: Vec<Member> = drawn
        .into_iter()
        .zip(scores)
        .map(|(candidate, score)| Member { candidate, score })
        .collect();
    let mut best = seed;
    for m in &scored {
        if m.score.fitness > best.score.fitness {
            best = m;
        }
    }
    Ok((best.clone(), scored))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Worst,
    Salient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroup {
    pub class_ids: BTreeSet<usize>,
    pub provenance: Provenance,
    pub anchor_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub groups: Vec<ClassGroup>,
    pub n_wst: usize,
    pub n_sln: usize,
    /// Classes predicted for misclassified images, by true class.
    pub misclass: BTreeMap<usize, BTreeSet<usize>>,
    /// Per-class accuracy under the template-phase prompt (`None` for
    /// classes without images).
    pub class_accuracy: Vec<Option<f64>>,
    /// Per-class fitness gain from adding every description of the class.
    pub class_gain: Vec<Option<f64>>,
}

impl GroupPlan {
    pub fn empty() -> Self {
        Self {
            groups: vec![],
            n_wst: 0,
            n_sln: 0,
            misclass: BTreeMap::new(),
            class_accuracy: vec![],
            class_gain: vec![],
        }
    }
}

/// Picks anchors by low per-class accuracy and high description gain and
/// groups each with the classes its images get confused with. Classes
/// without images in the evaluator are never anchors.
pub fn group_sample(
    evaluator: &Evaluator,
    candidate: &CandidatePrompt,
    pools: &[Vec<usize>],
    n_wst: usize,
    n_sln: usize,
) -> Result<GroupPlan> {
    let store = evaluator.store();
    let n_classes = store.n_classes();
    let labels: Vec<usize> = evaluator.images().iter().map(|&i| store.labels()[i] as usize).collect();
    let predicted = predict(&evaluator.scores(candidate)?);

    let mut rows_of = vec![Vec::new(); n_classes];
    let mut misclass: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (k, (&y, &p)) in labels.iter().zip(&predicted).enumerate() {
        rows_of[y].push(k);
        if p != y {
            misclass.entry(y).or_default().insert(p);
        }
    }

    let cache = evaluator.make_cache(candidate)?;
    let mut accuracy = vec![0.0; n_classes];
    let mut gain = vec![0.0; n_classes];
    for c in 0..n_classes {
        let rows = &rows_of[c];
        if rows.is_empty() {
            continue;
        }
        let before = cache.breakdown_on(rows);
        accuracy[c] = before.accuracy;
        let add: Vec<usize> = pools
            .get(c)
            .map(|p| {
                p.iter()
                    .copied()
                    .filter(|id| !candidate.desc_ids[c].contains(id))
                    .collect()
            })
            .unwrap_or_default();
        gain[c] = cache.preview_delta(c, &add, &[], rows)?.fitness - before.fitness;
    }

    let seen = |v: &[f64]| -> Vec<Option<f64>> {
        v.iter()
            .zip(&rows_of)
            .map(|(&x, rows)| (!rows.is_empty()).then_some(x))
            .collect()
    };
    let present: Vec<usize> = (0..n_classes).filter(|&c| !rows_of[c].is_empty()).collect();
    let mut worst = present.clone();
    worst.sort_by(|&a, &b| accuracy[a].total_cmp(&accuracy[b]).then(a.cmp(&b)));
    let mut salient = present;
    salient.sort_by(|&a, &b| gain[b].total_cmp(&gain[a]).then(a.cmp(&b)));

    let anchors = worst
        .into_iter()
        .take(n_wst)
        .map(|c| (c, Provenance::Worst))
        .chain(salient.into_iter().take(n_sln).map(|c| (c, Provenance::Salient)));
    let mut groups: Vec<ClassGroup> = Vec::new();
    for (anchor, provenance) in anchors {
        let mut class_ids = misclass.get(&anchor).cloned().unwrap_or_default();
        class_ids.insert(anchor);
        if groups.iter().all(|g| g.class_ids != class_ids) {
            groups.push(ClassGroup {
                class_ids,
                provenance,
                anchor_class: anchor,
            });
        }
    }
    Ok(GroupPlan {
        groups,
        n_wst,
        n_sln,
        misclass,
        class_accuracy: seen(&accuracy),
        class_gain: seen(&gain),
    })
}
