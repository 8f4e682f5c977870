//! Candidate generation (edit and evolution operators) and the iterative
//! generate/score/retain-top-k loop.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{CandidatePrompt, Objective, ScoreBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Iterations per loop call.
    pub iterations: usize,
    /// Edit-generation steps per population member.
    pub edit_steps: usize,
    /// Evolution steps per iteration.
    pub evolve_steps: usize,
    /// Retained population size.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            edit_steps: 8,
            evolve_steps: 8,
            top_k: 4,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// The elements edits and mutations draw from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElementPool {
    /// Template ids shared by every class.
    Templates(Vec<usize>),
    /// Description text ids per class, for the classes of one group.
    Descriptions(BTreeMap<usize, Vec<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Element {
    Template(usize),
    Description(usize, usize),
}

impl ElementPool {
    fn elements(&self) -> Vec<Element> {
        match self {
            ElementPool::Templates(ids) => ids.iter().map(|&t| Element::Template(t)).collect(),
            ElementPool::Descriptions(map) => map
                .iter()
                .flat_map(|(&c, ids)| ids.iter().map(move |&id| Element::Description(c, id)))
                .collect(),
        }
    }

    /// Classes whose descriptions this pool may touch.
    pub fn classes(&self) -> Option<BTreeSet<usize>> {
        match self {
            ElementPool::Templates(_) => None,
            ElementPool::Descriptions(map) => Some(map.keys().copied().collect()),
        }
    }

    /// Elements of `p` that belong to this pool's scope.
    fn members_of(&self, p: &CandidatePrompt) -> Vec<Element> {
        match self {
            ElementPool::Templates(_) => p.template_ids.iter().map(|&t| Element::Template(t)).collect(),
            ElementPool::Descriptions(map) => map
                .keys()
                .flat_map(|&c| p.desc_ids[c].iter().map(move |&id| Element::Description(c, id)))
                .collect(),
        }
    }
}

fn contains(p: &CandidatePrompt, e: Element) -> bool {
    match e {
        Element::Template(t) => p.template_ids.contains(&t),
        Element::Description(c, id) => p.desc_ids[c].contains(&id),
    }
}

fn insert(p: &mut CandidatePrompt, e: Element) {
    match e {
        Element::Template(t) => p.template_ids.insert(t),
        Element::Description(c, id) => p.desc_ids[c].insert(id),
    };
}

fn remove(p: &mut CandidatePrompt, e: Element) {
    match e {
        Element::Template(t) => p.template_ids.remove(&t),
        Element::Description(c, id) => p.desc_ids[c].remove(&id),
    };
}

fn same_slot(a: Element, b: Element) -> bool {
    match (a, b) {
        (Element::Template(_), Element::Template(_)) => true,
        (Element::Description(c, _), Element::Description(d, _)) => c == d,
        _ => false,
    }
}

fn pick<T: Copy>(items: &[T], rng: &mut impl Rng) -> Option<T> {
    (!items.is_empty()).then(|| items[rng.random_range(0..items.len())])
}

/// Collects candidates, dropping repeats and anything in `exclude`.
struct Unique<'a> {
    seen: HashSet<CandidatePrompt>,
    out: Vec<CandidatePrompt>,
    exclude: &'a dyn Fn(&CandidatePrompt) -> bool,
}

impl<'a> Unique<'a> {
    fn new(exclude: &'a dyn Fn(&CandidatePrompt) -> bool) -> Self {
        Self {
            seen: HashSet::new(),
            out: Vec::new(),
            exclude,
        }
    }

    fn push(&mut self, c: CandidatePrompt) {
        if !(self.exclude)(&c) && self.seen.insert(c.clone()) {
            self.out.push(c);
        }
    }
}

/// Add, delete and replace edits around `parent`, `steps` times.
///
/// Added elements are drawn from the pool minus the parent; deleted and
/// swapped-out elements from the parent's in-scope elements, and a swapped-in
/// element comes from the same class as the one it replaces. A template
/// delete that would leave no templates is skipped. Results equal to the
/// parent or to an earlier result are dropped.
pub fn edit_generate(
    parent: &CandidatePrompt,
    pool: &ElementPool,
    steps: usize,
    rng: &mut impl Rng,
) -> Vec<CandidatePrompt> {
    let fresh: Vec<Element> = pool.elements().into_iter().filter(|&e| !contains(parent, e)).collect();
    let current = pool.members_of(parent);
    let removable: &[Element] = match pool {
        ElementPool::Templates(_) if current.len() <= 1 => &[],
        _ => &current,
    };

    let not_parent = |c: &CandidatePrompt| c == parent;
    let mut out = Unique::new(&not_parent);
    for _ in 0..steps {
        if let Some(e) = pick(&fresh, rng) {
            let mut child = parent.clone();
            insert(&mut child, e);
            out.push(child);
        }
        if let Some(e) = pick(removable, rng) {
            let mut child = parent.clone();
            remove(&mut child, e);
            out.push(child);
        }
        // a replace swaps within one class
        let d_out = pick(&current, rng);
        let d_in = d_out.and_then(|out| {
            let same: Vec<Element> = fresh.iter().copied().filter(|&e| same_slot(e, out)).collect();
            pick(&same, rng)
        });
        if let (Some(d_in), Some(d_out)) = (d_in, d_out) {
            let mut child = parent.clone();
            insert(&mut child, d_in);
            remove(&mut child, d_out);
            out.push(child);
        }
    }
    out.out
}

/// Union of two candidates over the pool's scope. Outside the scope the
/// result copies `first`, so callers pass the higher-ranked parent first.
pub fn crossover(first: &CandidatePrompt, second: &CandidatePrompt, pool: &ElementPool) -> CandidatePrompt {
    let mut child = first.clone();
    match pool {
        ElementPool::Templates(_) => {
            child.template_ids.extend(second.template_ids.iter().copied());
        }
        ElementPool::Descriptions(map) => {
            for &c in map.keys() {
                child.desc_ids[c].extend(second.desc_ids[c].iter().copied());
            }
        }
    }
    child
}

fn resample(current: &BTreeSet<usize>, library: &[usize], rng: &mut impl Rng) -> BTreeSet<usize> {
    let all: Vec<usize> = library
        .iter()
        .copied()
        .chain(current.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = current.len().min(all.len());
    sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect()
}

/// Replaces the in-scope elements of `p` with a same-size uniform draw from
/// the pool plus those elements (per class for descriptions).
pub fn mutate(p: &CandidatePrompt, pool: &ElementPool, rng: &mut impl Rng) -> CandidatePrompt {
    let mut child = p.clone();
    match pool {
        ElementPool::Templates(ids) => {
            child.template_ids = resample(&p.template_ids, ids, rng);
        }
        ElementPool::Descriptions(map) => {
            for (&c, ids) in map {
                child.desc_ids[c] = resample(&p.desc_ids[c], ids, rng);
            }
        }
    }
    child
}

/// Crossover of two random population members followed by mutation, `steps`
/// times. Candidates already in the population are dropped.
pub fn evolve_generate(
    population: &Population,
    pool: &ElementPool,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CandidatePrompt>> {
    let members = population.members();
    if members.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let in_population = |c: &CandidatePrompt| population.contains(c);
    let mut out = Unique::new(&in_population);
    for _ in 0..steps {
        let i = rng.random_range(0..members.len());
        let j = rng.random_range(0..members.len());
        let (a, b) = (i.min(j), i.max(j));
        let crossed = crossover(&members[a].candidate, &members[b].candidate, pool);
        let mutated = mutate(&crossed, pool, rng);
        out.push(crossed);
        out.push(mutated);
    }
    Ok(out.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub candidate: CandidatePrompt,
    pub score: ScoreBreakdown,
}

/// Scored candidates sorted by fitness (descending) then generation tag
/// (ascending), without value duplicates, capped at `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    k: usize,
    members: Vec<Member>,
}

impl Population {
    pub fn new(k: usize) -> Self {
        Self {
            k: k.max(1),
            members: Vec::new(),
        }
    }

    pub fn from_members(k: usize, members: Vec<Member>) -> Self {
        let mut p = Self::new(k);
        p.merge(members);
        p
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best(&self) -> Option<&Member> {
        self.members.first()
    }

    pub fn contains(&self, c: &CandidatePrompt) -> bool {
        self.members.iter().any(|m| &m.candidate == c)
    }

    /// Adds scored candidates, re-sorts, drops duplicates (keeping the
    /// first in sort order) and truncates to capacity.
    pub fn merge(&mut self, new: impl IntoIterator<Item = Member>) {
        self.members.extend(new);
        self.members.sort_by(|a, b| {
            b.score
                .fitness
                .total_cmp(&a.score.fitness)
                .then(a.candidate.generation_tag.cmp(&b.candidate.generation_tag))
        });
        let mut seen = HashSet::new();
        self.members.retain(|m| seen.insert(m.candidate.clone()));
        self.members.truncate(self.k);
    }

    /// Changes the capacity, truncating if needed.
    pub fn set_capacity(&mut self, k: usize) {
        self.k = k.max(1);
        self.members.truncate(self.k);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStep {
    Edit,
    Evolve,
}

/// State after one population update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub step: UpdateStep,
    pub best_fitness: f64,
    pub population: usize,
    /// Candidates scored in this step.
    pub evaluations: usize,
}

/// Owns the RNG stream, generation tags and evaluation count of one search.
/// The objective is passed per call so one stream can serve several
/// evaluators.
pub struct Searcher {
    cfg: SearchConfig,
    rng: ChaCha8Rng,
    next_tag: u64,
    evaluations: usize,
    log: Option<Vec<Member>>,
}

impl Searcher {
    pub fn new(cfg: SearchConfig) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            next_tag: 0,
            evaluations: 0,
            log: None,
        }
    }

    /// Switches to an independent RNG stream for the same seed.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self
    }

    /// Starts tags at `tag` (tags stay monotone across searches).
    pub fn with_first_tag(mut self, tag: u64) -> Self {
        self.next_tag = tag;
        self
    }

    /// Keeps every scored candidate for later inspection.
    pub fn with_logging(mut self, on: bool) -> Self {
        self.log = on.then(Vec::new);
        self
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
    pub fn next_tag(&self) -> u64 {
        self.next_tag
    }
    pub fn take_log(&mut self) -> Vec<Member> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Tags and scores candidates, in order.
    pub fn score<O: Objective + ?Sized>(
        &mut self,
        objective: &O,
        candidates: Vec<CandidatePrompt>,
    ) -> Result<Vec<Member>> {
        let tagged: Vec<CandidatePrompt> = candidates
            .into_iter()
            .map(|c| {
                let tag = self.next_tag;
                self.next_tag += 1;
                c.with_tag(tag)
            })
            .collect();
        let members = self.rescore(objective, tagged)?;
        if let Some(log) = self.log.as_mut() {
            log.extend(members.iter().cloned());
        }
        Ok(members)
    }

    /// Scores candidates keeping their tags (used when the objective
    /// changes under an existing population). Not logged.
    pub fn rescore<O: Objective + ?Sized>(
        &mut self,
        objective: &O,
        candidates: Vec<CandidatePrompt>,
    ) -> Result<Vec<Member>> {
        let scores = objective.evaluate_batch(&candidates)?;
        self.evaluations += candidates.len();
        Ok(candidates
            .into_iter()
            .zip(scores)
            .map(|(candidate, score)| Member { candidate, score })
            .collect())
    }

    /// Scores `seeds` into a fresh population of capacity `top_k`.
    pub fn seed<O: Objective + ?Sized>(&mut self, objective: &O, seeds: Vec<CandidatePrompt>) -> Result<Population> {
        let members = self.score(objective, seeds)?;
        Ok(Population::from_members(self.cfg.top_k, members))
    }

    /// Runs the configured number of iterations. Each iteration edits every
    /// member, merges the scored edits, then evolves the updated population
    /// and merges again.
    pub fn run<O: Objective + ?Sized>(
        &mut self,
        objective: &O,
        mut population: Population,
        pool: &ElementPool,
        trace: &mut Vec<TraceStep>,
    ) -> Result<Population> {
        if population.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        population.set_capacity(self.cfg.top_k);
        for iteration in 0..self.cfg.iterations {
            let mut seen = HashSet::new();
            let mut edits = Vec::new();
            for m in population.members() {
                for c in edit_generate(&m.candidate, pool, self.cfg.edit_steps, &mut self.rng) {
                    if !population.contains(&c) && seen.insert(c.clone()) {
                        edits.push(c);
                    }
                }
            }
            let n = edits.len();
            let scored = self.score(objective, edits)?;
            population.merge(scored);
            trace.push(step(iteration, UpdateStep::Edit, &population, n));

            let evolved = evolve_generate(&population, pool, self.cfg.evolve_steps, &mut self.rng)?;
            let n = evolved.len();
            let scored = self.score(objective, evolved)?;
            population.merge(scored);
            trace.push(step(iteration, UpdateStep::Evolve, &population, n));
        }
        Ok(population)
    }
}

fn step(iteration: usize, step: UpdateStep, p: &Population, evaluations: usize) -> TraceStep {
    TraceStep {
        iteration,
        step,
        best_fitness: p.best().map_or(f64::NEG_INFINITY, |m| m.score.fitness),
        population: p.len(),
        evaluations,
    }
}

/// One loop call with a fresh RNG stream seeded from `cfg.seed`.
pub fn apo_loop<O: Objective + ?Sized>(
    objective: &O,
    initial: Population,
    pool: &ElementPool,
    cfg: &SearchConfig,
) -> Result<(Population, Vec<TraceStep>)> {
    cfg.validate()?;
    let first_tag = initial
        .members()
        .iter()
        .map(|m| m.candidate.generation_tag + 1)
        .max()
        .unwrap_or(0);
    let mut searcher = Searcher::new(*cfg).with_first_tag(first_tag);
    let mut trace = Vec::new();
    let population = searcher.run(objective, initial, pool, &mut trace)?;
    Ok((population, trace))
}
