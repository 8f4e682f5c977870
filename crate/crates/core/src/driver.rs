//! End-to-end runs: template search, description initialization, group-wise
//! description search, persisted artifacts and the two-phase encode
//! protocol (stop with a manifest, resume once it has been encoded).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{EncodeManifest, LibrarySources, PromptLibrary};
use crate::sampling::{description_pools, group_sample, prompt_sample_init, GroupPlan, SamplingConfig};
use crate::scoring::{CandidatePrompt, Evaluator, Objective, PromptSpace, ScoreBreakdown, ScoreParams};
use crate::search::{ElementPool, Member, Population, SearchConfig, Searcher, TraceStep, UpdateStep};
use crate::store::{EmbeddingStore, ImageBundle, TextBundle};

pub const RESULT_FILE: &str = "result.json";
pub const PROMPT_FILE: &str = "prompt.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CANDIDATE_LOG: &str = "candidates.jsonl";

const TEMPLATE_STREAM: u64 = 0;
const DESCRIPTION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Descriptions are encoded up front, integrated with `integration_templates`.
    #[default]
    PreIntegrated,
    /// Descriptions are encoded after the template search, integrated with
    /// the templates it picked.
    TwoPhase,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Description-phase fitness on every training image.
    #[default]
    Full,
    /// Only on images of the active group's classes.
    Group,
}

/// Either one combined `library.json` or the separate input files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub library: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domains: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<PathBuf>,
}

impl LibraryFiles {
    pub fn combined(path: impl Into<PathBuf>) -> Self {
        Self {
            library: Some(path.into()),
            ..Default::default()
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [
            &mut self.library,
            &mut self.templates,
            &mut self.domains,
            &mut self.classes,
            &mut self.descriptions,
        ]
        .into_iter()
        .flatten()
    }

    pub fn load(&self) -> Result<LibrarySources> {
        for p in [
            &self.library,
            &self.templates,
            &self.domains,
            &self.classes,
            &self.descriptions,
        ]
        .into_iter()
        .flatten()
        {
            require(p)?;
        }
        match (&self.library, &self.templates, &self.classes) {
            (Some(lib), None, None) if self.domains.is_none() && self.descriptions.is_none() => {
                LibrarySources::from_file(lib)
            }
            (None, Some(t), Some(c)) => {
                LibrarySources::from_files(t, self.domains.as_deref(), c, self.descriptions.as_deref())
            }
            _ => Err(Error::Config(
                "library needs either `library` or `templates` + `classes`".into(),
            )),
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.display().to_string()))
    }
}

fn default_integration() -> Vec<usize> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_bundle: PathBuf,
    /// Text bundles bound up front (template instances, and descriptions in
    /// pre-integrated mode).
    #[serde(default)]
    pub text_bundles: Vec<PathBuf>,
    /// Where the encoded description manifest is expected in two-phase mode.
    #[serde(default)]
    pub description_bundle: Option<PathBuf>,
    pub library: LibraryFiles,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub scoring: ScoreParams,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default = "default_integration")]
    pub integration_templates: Vec<usize>,
    #[serde(default)]
    pub synonyms_in_templates: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads for fitness evaluation; `None` uses every core.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub log_candidates: bool,
}

impl RunConfig {
    pub fn new(train_bundle: impl Into<PathBuf>, text_bundles: Vec<PathBuf>, library: LibraryFiles) -> Self {
        Self {
            train_bundle: train_bundle.into(),
            text_bundles,
            description_bundle: None,
            library,
            search: SearchConfig::default(),
            sampling: SamplingConfig::default(),
            scoring: ScoreParams::default(),
            mode: Mode::default(),
            scope: Scope::default(),
            integration_templates: default_integration(),
            synonyms_in_templates: false,
            output_dir: default_output(),
            threads: None,
            log_candidates: false,
        }
    }

    /// Reads a config file; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // absolute, so paths written into run outputs work from any directory
        let base = std::path::absolute(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_bundle);
        self.text_bundles.iter_mut().for_each(fix);
        if let Some(p) = self.description_bundle.as_mut() {
            fix(p);
        }
        self.library.paths_mut().for_each(fix);
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.sampling.validate()?;
        self.scoring.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.mode == Mode::TwoPhase && self.description_bundle.is_none() {
            return Err(Error::Config("two_phase mode needs description_bundle".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Template,
    Description,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Template => "template",
            Phase::Description => "description",
        }
    }
}

/// One population update of one search call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub phase: Phase,
    pub group: Option<usize>,
    pub iteration: usize,
    pub step: UpdateStep,
    pub best_fitness: f64,
    pub population: usize,
    pub evaluations: usize,
}

impl TraceRow {
    fn new(phase: Phase, group: Option<usize>, t: TraceStep) -> Self {
        Self {
            phase,
            group,
            iteration: t.iteration,
            step: t.step,
            best_fitness: t.best_fitness,
            population: t.population,
            evaluations: t.evaluations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub phase_completed: Phase,
    pub best_candidate: CandidatePrompt,
    pub best_score: ScoreBreakdown,
    pub best_digest: String,
    pub template_candidate: CandidatePrompt,
    pub template_score: ScoreBreakdown,
    pub init_candidate: Option<CandidatePrompt>,
    pub init_score: Option<ScoreBreakdown>,
    /// Templates the description texts are integrated with.
    pub integration_templates: Vec<usize>,
    pub group_plan: Option<GroupPlan>,
    pub trace: Vec<TraceRow>,
    pub evaluations: usize,
    /// First generation tag not yet handed out.
    pub next_tag: u64,
    pub config_snapshot: RunConfig,
}

impl RunResult {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// A scored candidate as written to the candidate log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedCandidate {
    pub phase: Phase,
    pub digest: String,
    pub fitness: f64,
    pub accuracy: f64,
    pub candidate: CandidatePrompt,
}

impl LoggedCandidate {
    fn new(phase: Phase, m: &Member) -> Self {
        Self {
            phase,
            digest: m.candidate.digest(),
            fitness: m.score.fitness,
            accuracy: m.score.accuracy,
            candidate: m.candidate.clone(),
        }
    }
}

pub fn read_candidate_log(path: &Path) -> Result<Vec<LoggedCandidate>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
    }
    Ok(out)
}

/// Human-readable prompt: per class the texts whose embeddings are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    /// Text bundles the texts were resolved against.
    pub text_bundles: Vec<PathBuf>,
    pub template_ids: BTreeSet<usize>,
    pub classes: Vec<ClassPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub class_id: usize,
    pub name: String,
    pub templates: Vec<String>,
    pub descriptions: Vec<String>,
    /// Every encoded text of the class prompt, templates first.
    pub texts: Vec<String>,
}

impl PromptFile {
    pub fn build(
        candidate: &CandidatePrompt,
        library: &PromptLibrary,
        store: &EmbeddingStore,
        space: &PromptSpace,
        text_bundles: Vec<PathBuf>,
    ) -> Self {
        let source = |id: usize| store.meta(id).map(|m| m.source_text.clone()).unwrap_or_default();
        let classes = (0..library.n_classes())
            .map(|c| ClassPrompt {
                class_id: c,
                name: library.class_names()[c].clone(),
                templates: candidate
                    .template_ids
                    .iter()
                    .map(|&t| library.templates()[t].clone())
                    .collect(),
                descriptions: candidate.desc_ids[c].iter().map(|&id| source(id)).collect(),
                texts: candidate.class_texts(space, c).map(source).collect(),
            })
            .collect();
        Self {
            text_bundles,
            template_ids: candidate.template_ids.clone(),
            classes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Maps each class's texts to text ids of `store` by exact source text
    /// and returns them as a one-template prompt space plus the candidate
    /// that selects it.
    pub fn resolve(&self, store: &EmbeddingStore) -> Result<(PromptSpace, CandidatePrompt)> {
        if self.classes.len() != store.n_classes() {
            return Err(Error::InvalidBundle(format!(
                "prompt has {} classes, bundle has {}",
                self.classes.len(),
                store.n_classes()
            )));
        }
        let mut index: BTreeMap<(usize, &str), usize> = BTreeMap::new();
        for (id, m) in store.text_meta().iter().enumerate() {
            index.entry((m.class_id, m.source_text.as_str())).or_insert(id);
        }
        let mut table = Vec::with_capacity(self.classes.len());
        for (c, cp) in self.classes.iter().enumerate() {
            let ids = cp
                .texts
                .iter()
                .map(|t| {
                    index
                        .get(&(c, t.as_str()))
                        .copied()
                        .ok_or_else(|| Error::UnresolvedText {
                            class: c,
                            text: t.clone(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(Error::UnresolvedText {
                    class: c,
                    text: String::new(),
                });
            }
            table.push(ids);
        }
        Ok((
            PromptSpace::new(vec![table]),
            CandidatePrompt::new([0], self.classes.len()),
        ))
    }
}

/// Result of one template or description search.
#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub best: Member,
    pub trace: Vec<TraceRow>,
    pub evaluations: usize,
    pub next_tag: u64,
    pub log: Vec<Member>,
}

/// Template search seeded with the base template alone.
pub fn optimize_templates<O: Objective + ?Sized>(
    objective: &O,
    library: &PromptLibrary,
    cfg: &SearchConfig,
    log: bool,
) -> Result<PhaseOutput> {
    cfg.validate()?;
    let n_templates = library.templates().len();
    if n_templates == 0 {
        return Err(Error::NoTemplates);
    }
    let mut searcher = Searcher::new(*cfg).with_stream(TEMPLATE_STREAM).with_logging(log);
    let seed = CandidatePrompt::new([library.base_template()], library.n_classes());
    let population = searcher.seed(objective, vec![seed])?;
    let mut steps = Vec::new();
    let population = searcher.run(
        objective,
        population,
        &ElementPool::Templates((0..n_templates).collect()),
        &mut steps,
    )?;
    Ok(PhaseOutput {
        best: population.best().cloned().ok_or(Error::EmptyPopulation)?,
        trace: steps
            .into_iter()
            .map(|t| TraceRow::new(Phase::Template, None, t))
            .collect(),
        evaluations: searcher.evaluations(),
        next_tag: searcher.next_tag(),
        log: searcher.take_log(),
    })
}

/// Description-phase output: the prompt-sampled start plus the search.
#[derive(Debug, Clone)]
pub struct DescriptionOutput {
    pub init: Member,
    pub search: PhaseOutput,
}

/// Prompt-sampled initialization followed by one search per group, carrying
/// the population from group to group.
#[allow(clippy::too_many_arguments)]
pub fn optimize_descriptions(
    evaluator: &Evaluator,
    template_best: &Member,
    pools: &[Vec<usize>],
    plan: &GroupPlan,
    search: &SearchConfig,
    sampling: &SamplingConfig,
    scope: Scope,
    first_tag: u64,
    log: bool,
) -> Result<DescriptionOutput> {
    search.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let (init, drawn) = prompt_sample_init(evaluator, template_best, pools, sampling, first_tag, &mut rng)?;
    let mut searcher = Searcher::new(*search)
        .with_stream(DESCRIPTION_STREAM)
        .with_first_tag(first_tag + sampling.t_sample as u64)
        .with_logging(log);
    let mut population = Population::from_members(search.top_k, vec![init.clone()]);
    let mut trace = Vec::new();
    let store = evaluator.store();
    let by_class = store.images_by_class();

    for (g, group) in plan.groups.iter().enumerate() {
        let pool = ElementPool::Descriptions(
            group
                .class_ids
                .iter()
                .map(|&c| (c, pools.get(c).cloned().unwrap_or_default()))
                .collect(),
        );
        let mut steps = Vec::new();
        population = match scope {
            Scope::Full => searcher.run(evaluator, population, &pool, &mut steps)?,
            Scope::Group => {
                let mut rows: Vec<usize> = group.class_ids.iter().flat_map(|&c| by_class[c].clone()).collect();
                rows.sort_unstable();
                let local = Evaluator::with_images(store, evaluator.space(), evaluator.params(), rows);
                let members = population.members().iter().map(|m| m.candidate.clone()).collect();
                let rescored = searcher.rescore(&local, members)?;
                let searched = searcher.run(
                    &local,
                    Population::from_members(search.top_k, rescored),
                    &pool,
                    &mut steps,
                )?;
                let members = searched.members().iter().map(|m| m.candidate.clone()).collect();
                Population::from_members(search.top_k, searcher.rescore(evaluator, members)?)
            }
        };
        trace.extend(steps.into_iter().map(|t| TraceRow::new(Phase::Description, Some(g), t)));
    }
    if scope == Scope::Group {
        // group-local fitness can drop the start; keep it in the final pick
        population.merge([init.clone()]);
    }

    let mut log_members = if log { drawn } else { Vec::new() };
    log_members.extend(searcher.take_log());
    Ok(DescriptionOutput {
        init,
        search: PhaseOutput {
            best: population.best().cloned().ok_or(Error::EmptyPopulation)?,
            trace,
            evaluations: searcher.evaluations() + sampling.t_sample,
            next_tag: searcher.next_tag(),
            log: log_members,
        },
    })
}

/// How a run ended.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Complete(RunResult),
    /// The template search finished; descriptions must be encoded from the
    /// written manifest before the run can resume.
    ManifestPending {
        manifest: PathBuf,
        result: RunResult,
    },
}

impl RunOutcome {
    pub fn result(&self) -> &RunResult {
        match self {
            RunOutcome::Complete(r) | RunOutcome::ManifestPending { result: r, .. } => r,
        }
    }
}

/// Library, store and the text bundle paths that make up the store.
pub struct Inputs {
    pub library: PromptLibrary,
    pub store: EmbeddingStore,
    pub text_bundles: Vec<PathBuf>,
    /// Segment of the description bundle, once loaded.
    pub description_segment: Option<usize>,
}

impl Inputs {
    /// Loads the library, the image bundle (`images` overrides the config's
    /// training bundle) and every text bundle, and binds every segment whose
    /// fingerprint matches a manifest the library can produce.
    pub fn open(cfg: &RunConfig, images: Option<&Path>) -> Result<Self> {
        let image_path = images.unwrap_or(&cfg.train_bundle);
        require(image_path)?;
        let mut library = PromptLibrary::new(cfg.library.load()?)?;
        let mut paths = cfg.text_bundles.clone();
        for p in &paths {
            require(p)?;
        }
        let mut description_segment = None;
        if let Some(p) = cfg.description_bundle.as_ref().filter(|p| p.exists()) {
            description_segment = Some(paths.len());
            paths.push(p.clone());
        }
        let texts = paths.iter().map(TextBundle::load).collect::<Result<Vec<_>>>()?;
        let store = EmbeddingStore::new(ImageBundle::load(image_path)?, texts)?;
        if store.n_classes() != library.n_classes() {
            return Err(Error::InvalidBundle(format!(
                "bundles have {} classes, library has {}",
                store.n_classes(),
                library.n_classes()
            )));
        }

        let mut known = vec![library.template_manifest()?];
        if !cfg.integration_templates.is_empty()
            && (0..library.n_classes()).any(|c| !library.descriptions(c).is_empty())
        {
            known.push(library.instantiate_manifest(&cfg.integration_templates)?);
            known.push(library.description_manifest(&cfg.integration_templates)?);
        }
        for seg in 0..store.n_segments() {
            let found = store.segment_fingerprint(seg);
            match known.iter().find(|m| Some(m.fingerprint.as_str()) == found) {
                Some(m) => library.bind_embeddings(m, &store, seg)?,
                // bound later against the manifest the template search asks for
                None if Some(seg) == description_segment => {}
                None => {
                    return Err(Error::FingerprintMismatch {
                        expected: known
                            .iter()
                            .map(|m| m.fingerprint.as_str())
                            .collect::<Vec<_>>()
                            .join(" or "),
                        found: found.unwrap_or("<none>").to_string(),
                    })
                }
            }
        }
        Ok(Self {
            library,
            store,
            text_bundles: paths,
            description_segment,
        })
    }
}

/// Runs the whole pipeline described by `cfg` and writes its artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run_inner(cfg)),
        None => run_inner(cfg),
    }
}

fn run_inner(cfg: &RunConfig) -> Result<RunOutcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let Inputs {
        mut library,
        store,
        text_bundles,
        description_segment,
    } = Inputs::open(cfg, None)?;
    if !library.templates_bound() {
        return Err(Error::MissingInput(
            "no text bundle holds the template instances".into(),
        ));
    }
    let space = library.prompt_space(cfg.synonyms_in_templates)?;
    let evaluator = Evaluator::new(&store, &space, cfg.scoring);

    let (template, template_log) = match resume_point(cfg, &evaluator)? {
        Some(found) => found,
        None => {
            let t = optimize_templates(&evaluator, &library, &cfg.search, cfg.log_candidates)?;
            let log = t.log.iter().map(|m| LoggedCandidate::new(Phase::Template, m)).collect();
            (t, log)
        }
    };

    let integration: Vec<usize> = match cfg.mode {
        Mode::PreIntegrated => cfg.integration_templates.clone(),
        Mode::TwoPhase => template.best.candidate.template_ids.iter().copied().collect(),
    };
    let has_descriptions = (0..library.n_classes()).any(|c| !library.descriptions(c).is_empty());
    if has_descriptions && !library.descriptions_bound(&integration) {
        let needed = library.description_manifest(&integration)?;
        match (cfg.mode, description_segment) {
            (Mode::TwoPhase, Some(seg)) => library.bind_embeddings(&needed, &store, seg)?,
            (Mode::TwoPhase, None) => {
                let manifest = out.join(MANIFEST_FILE);
                needed.save(&manifest)?;
                let result = checkpoint(cfg, &template, &integration);
                write_outputs(cfg, &result, &library, &store, &space, &text_bundles, &template_log)?;
                return Ok(RunOutcome::ManifestPending { manifest, result });
            }
            (Mode::PreIntegrated, _) => {
                return Err(Error::MissingInput(format!(
                    "descriptions are not encoded for integration templates {integration:?}"
                )))
            }
        }
    }

    let integration_set: BTreeSet<usize> = integration.iter().copied().collect();
    let pools = description_pools(
        &library,
        Some(&integration_set),
        &template.best.candidate.template_ids,
        cfg.synonyms_in_templates,
    )?;
    let (n_wst, n_sln) = cfg.sampling.group_counts(library.n_classes());
    let plan = group_sample(&evaluator, &template.best.candidate, &pools, n_wst, n_sln)?;
    let desc = optimize_descriptions(
        &evaluator,
        &template.best,
        &pools,
        &plan,
        &cfg.search,
        &cfg.sampling,
        cfg.scope,
        template.next_tag,
        cfg.log_candidates,
    )?;

    let best = desc.search.best.clone();
    let mut trace = template.trace.clone();
    trace.extend(desc.search.trace.iter().cloned());
    let result = RunResult {
        phase_completed: Phase::Description,
        best_digest: best.candidate.digest(),
        best_candidate: best.candidate,
        best_score: best.score,
        template_candidate: template.best.candidate.clone(),
        template_score: template.best.score,
        init_candidate: Some(desc.init.candidate.clone()),
        init_score: Some(desc.init.score),
        integration_templates: integration,
        group_plan: Some(plan),
        trace,
        evaluations: template.evaluations + desc.search.evaluations,
        next_tag: desc.search.next_tag,
        config_snapshot: cfg.clone(),
    };
    let mut log = template_log;
    log.extend(
        desc.search
            .log
            .iter()
            .map(|m| LoggedCandidate::new(Phase::Description, m)),
    );
    write_outputs(cfg, &result, &library, &store, &space, &text_bundles, &log)?;
    Ok(RunOutcome::Complete(result))
}

fn checkpoint(cfg: &RunConfig, template: &PhaseOutput, integration: &[usize]) -> RunResult {
    RunResult {
        phase_completed: Phase::Template,
        best_candidate: template.best.candidate.clone(),
        best_score: template.best.score,
        best_digest: template.best.candidate.digest(),
        template_candidate: template.best.candidate.clone(),
        template_score: template.best.score,
        init_candidate: None,
        init_score: None,
        integration_templates: integration.to_vec(),
        group_plan: None,
        trace: template.trace.clone(),
        evaluations: template.evaluations,
        next_tag: template.next_tag,
        config_snapshot: cfg.clone(),
    }
}

/// A template-phase checkpoint in the output directory written by the same
/// configuration, whose candidate still scores as recorded.
fn resume_point(cfg: &RunConfig, evaluator: &Evaluator) -> Result<Option<(PhaseOutput, Vec<LoggedCandidate>)>> {
    if cfg.mode != Mode::TwoPhase {
        return Ok(None);
    }
    let path = cfg.output_dir.join(RESULT_FILE);
    let Ok(prev) = RunResult::load(&path) else {
        return Ok(None);
    };
    if prev.phase_completed != Phase::Template || &prev.config_snapshot != cfg {
        return Ok(None);
    }
    let score = match evaluator.evaluate(&prev.template_candidate) {
        Ok(s) => s,
        Err(_) => return Ok(None),
    };
    if (score.fitness - prev.template_score.fitness).abs() > 1e-9 {
        return Ok(None);
    }
    let log = if cfg.log_candidates {
        let log_path = cfg.output_dir.join(CANDIDATE_LOG);
        match read_candidate_log(&log_path) {
            Ok(l) => l,
            Err(_) => return Ok(None),
        }
    } else {
        Vec::new()
    };
    let output = PhaseOutput {
        best: Member {
            candidate: prev.template_candidate,
            score: prev.template_score,
        },
        trace: prev.trace,
        evaluations: prev.evaluations,
        next_tag: prev.next_tag,
        log: Vec::new(),
    };
    Ok(Some((output, log)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn write_outputs(
    cfg: &RunConfig,
    result: &RunResult,
    library: &PromptLibrary,
    store: &EmbeddingStore,
    space: &PromptSpace,
    text_bundles: &[PathBuf],
    log: &[LoggedCandidate],
) -> Result<()> {
    let out = &cfg.output_dir;
    write_json(&out.join(RESULT_FILE), result)?;
    let prompt = PromptFile::build(&result.best_candidate, library, store, space, text_bundles.to_vec());
    write_json(&out.join(PROMPT_FILE), &prompt)?;
    write_trace(&out.join(TRACE_FILE), &result.trace)?;
    if cfg.log_candidates {
        let path = out.join(CANDIDATE_LOG);
        let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        for entry in log {
            let line = serde_json::to_string(entry).map_err(|e| Error::json(&path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    phase: String,
    group: Option<usize>,
    iteration: usize,
    step: String,
    best_fitness: f64,
    population: usize,
    evals: usize,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::InvalidBundle(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in trace {
        w.serialize(TraceRecord {
            phase: r.phase.as_str().into(),
            group: r.group,
            iteration: r.iteration,
            step: match r.step {
                UpdateStep::Edit => "edit".into(),
                UpdateStep::Evolve => "evolve".into(),
            },
            best_fitness: r.best_fitness,
            population: r.population,
            evals: r.evaluations,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of a `trace.csv` as (phase, group, iteration, step, best_fitness,
/// evaluations).
pub fn read_trace(path: &Path) -> Result<Vec<(String, Option<usize>, usize, String, f64, usize)>> {
    let csv_err = |e: csv::Error| Error::InvalidBundle(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<TraceRecord>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok((
                row.phase,
                row.group,
                row.iteration,
                row.step,
                row.best_fitness,
                row.evals,
            ))
        })
        .collect()
}

/// A logged candidate with its accuracy on a held-out image bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub digest: String,
    pub phase: Phase,
    pub train_fitness: f64,
    pub test_accuracy: f64,
}

/// Scores every distinct candidate in a run's candidate log on `images`,
/// using the run's own configuration, library and text bundles.
pub fn held_out_accuracy(run_dir: &Path, images: &Path) -> Result<Vec<HeldOut>> {
    let result = RunResult::load(&run_dir.join(RESULT_FILE))?;
    let log_path = run_dir.join(CANDIDATE_LOG);
    require(&log_path)?;
    let log = read_candidate_log(&log_path)?;
    let cfg = &result.config_snapshot;
    let mut inputs = Inputs::open(cfg, Some(images))?;
    let integration = &result.integration_templates;
    if let Some(seg) = inputs.description_segment {
        if !inputs.library.descriptions_bound(integration) {
            let needed = inputs.library.description_manifest(integration)?;
            inputs.library.bind_embeddings(&needed, &inputs.store, seg)?;
        }
    }
    let space = inputs.library.prompt_space(cfg.synonyms_in_templates)?;
    let evaluator = Evaluator::new(&inputs.store, &space, cfg.scoring);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for entry in log {
        if !seen.insert(entry.digest.clone()) {
            continue;
        }
        let test = evaluator.evaluate(&entry.candidate)?;
        out.push(HeldOut {
            digest: entry.digest,
            phase: entry.phase,
            train_fitness: entry.fitness,
            test_accuracy: test.accuracy,
        });
    }
    Ok(out)
}

/// Writes the manifest a run with `cfg` needs before it can start: every
/// text in pre-integrated mode, template instances only in two-phase mode.
pub fn initial_manifest(cfg: &RunConfig) -> Result<EncodeManifest> {
    let library = PromptLibrary::new(cfg.library.load()?)?;
    match cfg.mode {
        Mode::PreIntegrated => library.instantiate_manifest(&cfg.integration_templates),
        Mode::TwoPhase => library.template_manifest(),
    }
}
