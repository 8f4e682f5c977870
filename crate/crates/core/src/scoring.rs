//! Class scores, predictions and the fitness of a candidate prompt.
//!
//! The score of image `x` for class `c` is the mean cosine similarity between
//! `x` and every text in `D(c)`, where `D(c)` is the class's template
//! instances plus its selected descriptions. Fitness is accuracy plus
//! `alpha` times the mean log softmax probability of the true class, with
//! the softmax taken over `tau`-scaled scores.

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{dot, EmbeddingStore};

pub const DEFAULT_TAU: f64 = 100.0;
pub const DEFAULT_ALPHA: f64 = 1e3;

/// Text ids of every template's instances, per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpace {
    table: Vec<Vec<Vec<usize>>>,
}

impl PromptSpace {
    /// `table[t][c]` lists the text ids contributed to class `c` by template `t`.
    pub fn new(table: Vec<Vec<Vec<usize>>>) -> Self {
        Self { table }
    }

    pub fn n_templates(&self) -> usize {
        self.table.len()
    }

    pub fn ids(&self, template: usize, class: usize) -> &[usize] {
        &self.table[template][class]
    }

    fn check(&self, template: usize) -> Result<&[Vec<usize>]> {
        self.table
            .get(template)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTemplate(template))
    }
}

/// A complete prompt assignment: shared templates plus per-class
/// description text ids. Equality ignores `generation_tag`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub template_ids: BTreeSet<usize>,
    pub desc_ids: Vec<BTreeSet<usize>>,
    #[serde(default)]
    pub generation_tag: u64,
}

impl PartialEq for CandidatePrompt {
    fn eq(&self, other: &Self) -> bool {
        self.template_ids == other.template_ids && self.desc_ids == other.desc_ids
    }
}

impl Eq for CandidatePrompt {}

impl Hash for CandidatePrompt {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.template_ids.hash(state);
        self.desc_ids.hash(state);
    }
}

impl CandidatePrompt {
    pub fn new(template_ids: impl IntoIterator<Item = usize>, n_classes: usize) -> Self {
        Self {
            template_ids: template_ids.into_iter().collect(),
            desc_ids: vec![BTreeSet::new(); n_classes],
            generation_tag: 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.desc_ids.len()
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.generation_tag = tag;
        self
    }

    /// Total number of selected descriptions over all classes.
    pub fn n_descriptions(&self) -> usize {
        self.desc_ids.iter().map(BTreeSet::len).sum()
    }

    /// Hex SHA-256 over the candidate's canonical JSON form.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            t: &'a BTreeSet<usize>,
            d: &'a [BTreeSet<usize>],
        }
        let json = serde_json::to_vec(&Canon {
            t: &self.template_ids,
            d: &self.desc_ids,
        })
        .expect("candidate serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Text ids of `D(c)`: template instances first (template order), then
    /// descriptions (id order).
    pub fn class_texts<'a>(&'a self, space: &'a PromptSpace, class: usize) -> impl Iterator<Item = usize> + 'a {
        self.template_ids
            .iter()
            .flat_map(move |&t| space.ids(t, class).iter().copied())
            .chain(self.desc_ids[class].iter().copied())
    }

    fn validate(&self, store: &EmbeddingStore, space: &PromptSpace) -> Result<()> {
        if self.template_ids.is_empty() {
            return Err(Error::EmptyCandidate);
        }
        if self.desc_ids.len() != store.n_classes() {
            return Err(Error::Config(format!(
                "candidate covers {} classes, store has {}",
                self.desc_ids.len(),
                store.n_classes()
            )));
        }
        for &t in &self.template_ids {
            let per_class = space.check(t)?;
            if per_class.len() != store.n_classes() {
                return Err(Error::UnknownTemplate(t));
            }
            for ids in per_class {
                if let Some(&bad) = ids.iter().find(|&&id| id >= store.n_texts()) {
                    return Err(Error::UnboundId(bad));
                }
            }
        }
        for (c, ids) in self.desc_ids.iter().enumerate() {
            for &id in ids {
                match store.meta(id) {
                    Some(m) if m.class_id == c => {}
                    _ => return Err(Error::UnboundId(id)),
                }
            }
        }
        Ok(())
    }
}

/// Row-major `n_images x n_classes` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    n_classes: usize,
    data: Vec<f64>,
}

impl Scores {
    pub fn new(n_classes: usize, data: Vec<f64>) -> Self {
        assert!(n_classes > 0 && data.len() % n_classes == 0);
        Self { n_classes, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.first().map_or(1, Vec::len);
        Self::new(n, rows.iter().flatten().copied().collect())
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.n_classes + c]
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

pub fn predict(scores: &Scores) -> Vec<usize> {
    (0..scores.n_rows()).map(|i| argmax(scores.row(i))).collect()
}

/// `log softmax(tau * row)[target]`, computed with max subtraction.
pub fn log_softmax_at(row: &[f64], target: usize, tau: f64) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(tau * b));
    let sum: f64 = row.iter().map(|&s| (tau * s - m).exp()).sum();
    (tau * row[target] - m) - sum.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreParams {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub accuracy: f64,
    pub mean_true_logprob: f64,
    pub fitness: f64,
    pub n_samples: usize,
    pub n_correct: usize,
}

/// Accuracy, confidence term and fitness over the given score rows.
/// `rows` selects which rows (and matching `labels` entries) take part.
pub fn breakdown(
    scores: &Scores,
    labels: &[u32],
    rows: impl IntoIterator<Item = usize>,
    params: ScoreParams,
) -> ScoreBreakdown {
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut logprob = 0.0;
    for i in rows {
        let row = scores.row(i);
        let y = labels[i] as usize;
        n += 1;
        if argmax(row) == y {
            correct += 1;
        }
        logprob += log_softmax_at(row, y, params.tau);
    }
    let (accuracy, mean_true_logprob) = if n == 0 {
        (0.0, 0.0)
    } else {
        (correct as f64 / n as f64, logprob / n as f64)
    };
    ScoreBreakdown {
        accuracy,
        mean_true_logprob,
        fitness: accuracy + params.alpha * mean_true_logprob,
        n_samples: n,
        n_correct: correct,
    }
}

/// Scores every image of `store` against `candidate`, straight from the
/// embeddings.
pub fn class_scores(store: &EmbeddingStore, space: &PromptSpace, candidate: &CandidatePrompt) -> Result<Scores> {
    candidate.validate(store, space)?;
    let n_classes = store.n_classes();
    let texts = store.texts();
    let mut data = vec![0.0; store.n_images() * n_classes];
    for (i, img) in store.images().iter_rows().enumerate() {
        for c in 0..n_classes {
            let mut sum = 0.0;
            let mut count = 0usize;
            for id in candidate.class_texts(space, c) {
                sum += dot(img, texts.row(id));
                count += 1;
            }
            data[i * n_classes + c] = if count == 0 { 0.0 } else { sum / count as f64 };
        }
    }
    Ok(Scores::new(n_classes, data))
}

/// Anything that can assign a [`ScoreBreakdown`] to a candidate.
pub trait Objective: Sync {
    fn evaluate(&self, candidate: &CandidatePrompt) -> Result<ScoreBreakdown>;

    /// Scores a batch; order of the output matches the input.
    fn evaluate_batch(&self, candidates: &[CandidatePrompt]) -> Result<Vec<ScoreBreakdown>> {
        candidates.par_iter().map(|c| self.evaluate(c)).collect()
    }
}

/// Fitness evaluator over a fixed store, prompt space and image subset.
/// Image/text similarities are computed lazily and memoized per text.
pub struct Evaluator<'a> {
    store: &'a EmbeddingStore,
    space: &'a PromptSpace,
    params: ScoreParams,
    rows: Vec<usize>,
    columns: Vec<OnceLock<Box<[f64]>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(store: &'a EmbeddingStore, space: &'a PromptSpace, params: ScoreParams) -> Self {
        Self::with_images(store, space, params, (0..store.n_images()).collect())
    }

    /// Evaluates fitness on the listed image indices only.
    pub fn with_images(
        store: &'a EmbeddingStore,
        space: &'a PromptSpace,
        params: ScoreParams,
        rows: Vec<usize>,
    ) -> Self {
        Self {
            store,
            space,
            params,
            rows,
            columns: (0..store.n_texts()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn store(&self) -> &'a EmbeddingStore {
        self.store
    }
    pub fn space(&self) -> &'a PromptSpace {
        self.space
    }
    pub fn params(&self) -> ScoreParams {
        self.params
    }
    pub fn images(&self) -> &[usize] {
        &self.rows
    }

    fn column(&self, text_id: usize) -> &[f64] {
        self.columns[text_id].get_or_init(|| {
            let t = self.store.texts().row(text_id);
            self.rows.iter().map(|&i| dot(self.store.images().row(i), t)).collect()
        })
    }

    /// Scores of the evaluator's images (row `k` is image `images()[k]`).
    pub fn scores(&self, candidate: &CandidatePrompt) -> Result<Scores> {
        candidate.validate(self.store, self.space)?;
        let n_classes = self.store.n_classes();
        let n = self.rows.len();
        let mut data = vec![0.0; n * n_classes];
        let mut sums = vec![0.0; n];
        for c in 0..n_classes {
            sums.iter_mut().for_each(|s| *s = 0.0);
            let mut count = 0usize;
            for id in candidate.class_texts(self.space, c) {
                for (s, v) in sums.iter_mut().zip(self.column(id)) {
                    *s += v;
                }
                count += 1;
            }
            for (k, s) in sums.iter().enumerate() {
                data[k * n_classes + c] = if count == 0 { 0.0 } else { s / count as f64 };
            }
        }
        Ok(Scores::new(n_classes, data))
    }

    fn subset_labels(&self) -> Vec<u32> {
        self.rows.iter().map(|&i| self.store.labels()[i]).collect()
    }

    pub fn make_cache(&self, candidate: &CandidatePrompt) -> Result<ScoreCache<'_>> {
        candidate.validate(self.store, self.space)?;
        let n_classes = self.store.n_classes();
        let template_texts = (0..n_classes)
            .map(|c| {
                candidate
                    .template_ids
                    .iter()
                    .flat_map(|&t| self.space.ids(t, c).iter().copied())
                    .collect()
            })
            .collect();
        let mut cache = ScoreCache {
            n_classes,
            labels: self.subset_labels(),
            sums: vec![0.0; self.rows.len() * n_classes],
            counts: vec![0; n_classes],
            template_texts,
            desc_ids: candidate.desc_ids.clone(),
            evaluator: self,
        };
        for c in 0..n_classes {
            cache.recompute_column(c);
        }
        Ok(cache)
    }
}

impl Objective for Evaluator<'_> {
    fn evaluate(&self, candidate: &CandidatePrompt) -> Result<ScoreBreakdown> {
        let scores = self.scores(candidate)?;
        let labels = self.subset_labels();
        Ok(breakdown(&scores, &labels, 0..labels.len(), self.params))
    }
}

/// Fitness of `candidate` on every image of `store`.
pub fn fitness(
    store: &EmbeddingStore,
    space: &PromptSpace,
    candidate: &CandidatePrompt,
    params: ScoreParams,
) -> Result<ScoreBreakdown> {
    let scores = class_scores(store, space, candidate)?;
    Ok(breakdown(&scores, store.labels(), 0..store.n_images(), params))
}

/// Per-class similarity sums for one candidate, updated one class at a time.
pub struct ScoreCache<'e> {
    n_classes: usize,
    labels: Vec<u32>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    template_texts: Vec<Vec<usize>>,
    desc_ids: Vec<BTreeSet<usize>>,
    evaluator: &'e Evaluator<'e>,
}

impl Clone for ScoreCache<'_> {
    fn clone(&self) -> Self {
        Self {
            n_classes: self.n_classes,
            labels: self.labels.clone(),
            sums: self.sums.clone(),
            counts: self.counts.clone(),
            template_texts: self.template_texts.clone(),
            desc_ids: self.desc_ids.clone(),
            evaluator: self.evaluator,
        }
    }
}

impl ScoreCache<'_> {
    fn column_sum(&self, class: usize, descs: &BTreeSet<usize>) -> (Vec<f64>, usize) {
        let n = self.labels.len();
        let mut sums = vec![0.0; n];
        let mut count = 0;
        for &id in self.template_texts[class].iter().chain(descs) {
            for (s, v) in sums.iter_mut().zip(self.evaluator.column(id)) {
                *s += v;
            }
            count += 1;
        }
        (sums, count)
    }

    fn recompute_column(&mut self, class: usize) {
        let (col, count) = self.column_sum(class, &self.desc_ids[class]);
        for (k, v) in col.into_iter().enumerate() {
            self.sums[k * self.n_classes + class] = v;
        }
        self.counts[class] = count;
    }

    fn check_delta(&self, class: usize, add: &[usize], remove: &[usize]) -> Result<()> {
        if class >= self.n_classes {
            return Err(Error::Config(format!("class {class} out of range")));
        }
        let store = self.evaluator.store;
        for &id in add {
            match store.meta(id) {
                Some(m) if m.class_id == class => {}
                _ => return Err(Error::UnboundId(id)),
            }
        }
        for &id in remove {
            if !self.desc_ids[class].contains(&id) {
                return Err(Error::RemoveAbsent { class, id });
            }
        }
        Ok(())
    }

    fn edited(&self, class: usize, add: &[usize], remove: &[usize]) -> BTreeSet<usize> {
        let mut set = self.desc_ids[class].clone();
        for id in remove {
            set.remove(id);
        }
        set.extend(add.iter().copied());
        set
    }

    /// Removes then adds description ids of one class and recomputes only
    /// that class's column.
    pub fn apply_delta(&mut self, class: usize, add: &[usize], remove: &[usize]) -> Result<()> {
        self.check_delta(class, add, remove)?;
        if add.is_empty() && remove.is_empty() {
            return Ok(());
        }
        self.desc_ids[class] = self.edited(class, add, remove);
        self.recompute_column(class);
        Ok(())
    }

    /// Fitness the edited candidate would have on the image rows `rows`
    /// (indices into the evaluator's image list), without mutating the cache.
    pub fn preview_delta(
        &self,
        class: usize,
        add: &[usize],
        remove: &[usize],
        rows: &[usize],
    ) -> Result<ScoreBreakdown> {
        self.check_delta(class, add, remove)?;
        let (col, count) = self.column_sum(class, &self.edited(class, add, remove));
        let mut data = Vec::with_capacity(rows.len() * self.n_classes);
        let mut labels = Vec::with_capacity(rows.len());
        for &k in rows {
            for c in 0..self.n_classes {
                let v = if c == class {
                    if count == 0 {
                        0.0
                    } else {
                        col[k] / count as f64
                    }
                } else {
                    self.score(k, c)
                };
                data.push(v);
            }
            labels.push(self.labels[k]);
        }
        let scores = Scores::new(self.n_classes, data);
        Ok(breakdown(&scores, &labels, 0..labels.len(), self.evaluator.params))
    }

    fn score(&self, k: usize, c: usize) -> f64 {
        match self.counts[c] {
            0 => 0.0,
            n => self.sums[k * self.n_classes + c] / n as f64,
        }
    }

    pub fn scores(&self) -> Scores {
        let n = self.labels.len();
        let data = (0..n)
            .flat_map(|k| (0..self.n_classes).map(move |c| (k, c)))
            .map(|(k, c)| self.score(k, c))
            .collect();
        Scores::new(self.n_classes, data)
    }

    pub fn breakdown(&self) -> ScoreBreakdown {
        breakdown(
            &self.scores(),
            &self.labels,
            0..self.labels.len(),
            self.evaluator.params,
        )
    }

    /// Fitness restricted to the given evaluator-relative rows.
    pub fn breakdown_on(&self, rows: &[usize]) -> ScoreBreakdown {
        breakdown(
            &self.scores(),
            &self.labels,
            rows.iter().copied(),
            self.evaluator.params,
        )
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn desc_ids(&self) -> &[BTreeSet<usize>] {
        &self.desc_ids
    }
}

/// Pearson correlation coefficient.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DegenerateVariance(format!(
            "length mismatch {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateVariance("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ImageBundle, Matrix, TextBundle, TextKind, TextMeta};
    use proptest::prelude::*;

    fn meta(kind: TextKind, c: usize) -> TextMeta {
        TextMeta {
            kind,
            class_id: c,
            template_id: Some(0),
            source_text: String::new(),
        }
    }

    /// Store whose text rows are given explicitly; text `i` belongs to class
    /// `classes[i]`. Returns a space where template 0 maps class c to the
    /// first text of that class.
    fn store(
        images: &[Vec<f32>],
        labels: Vec<u32>,
        texts: &[Vec<f32>],
        classes: &[usize],
        n_classes: usize,
    ) -> (EmbeddingStore, PromptSpace) {
        let dim = images[0].len();
        let mut im = Matrix::from_rows(dim, images).unwrap();
        im.normalize_rows().unwrap();
        let mut tm = Matrix::from_rows(dim, texts).unwrap();
        tm.normalize_rows().unwrap();
        let mut metas = Vec::new();
        let mut first = vec![None; n_classes];
        for (i, &c) in classes.iter().enumerate() {
            let kind = if first[c].is_none() {
                first[c] = Some(i);
                TextKind::TemplateInstance
            } else {
                TextKind::Description
            };
            metas.push(meta(kind, c));
        }
        let s = EmbeddingStore::new(
            ImageBundle::new(n_classes, im, labels).unwrap(),
            vec![TextBundle::new(n_classes, tm, metas, None).unwrap()],
        )
        .unwrap();
        let space = PromptSpace::new(vec![first.iter().map(|f| vec![f.unwrap()]).collect()]);
        (s, space)
    }

    #[test]
    fn self_similarity_is_one() {
        let (s, space) = store(&[vec![0.6, 0.8]], vec![0], &[vec![0.6, 0.8]], &[0], 1);
        let sc = class_scores(&s, &space, &CandidatePrompt::new([0], 1)).unwrap();
        assert!((sc.get(0, 0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn class_score_is_mean_of_cosines() {
        // image e0; texts at cosine 0.2 and 0.6 with it
        let a = vec![0.2, (1.0f32 - 0.04).sqrt()];
        let b = vec![0.6, 0.8];
        let (s, space) = store(&[vec![1.0, 0.0]], vec![0], &[a, b], &[0, 0], 1);
        let mut cand = CandidatePrompt::new([0], 1);
        cand.desc_ids[0].insert(1);
        let sc = class_scores(&s, &space, &cand).unwrap();
        assert!((sc.get(0, 0) - 0.4).abs() < 1e-7);
    }

    #[test]
    fn orthogonal_texts_score_zero() {
        let (s, space) = store(
            &[vec![1.0, 0.0, 0.0]],
            vec![0],
            &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            &[0, 1],
            2,
        );
        let sc = class_scores(&s, &space, &CandidatePrompt::new([0], 2)).unwrap();
        assert_eq!(sc.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn predict_breaks_ties_low() {
        let s = Scores::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]);
        assert_eq!(predict(&s), vec![1, 0]);
        assert_eq!(argmax(&[0.3, 0.3, 0.2]), 0);
    }

    #[test]
    fn predict_matches_scalar_loop() {
        let rows = vec![
            vec![0.12, -0.4, 0.33, 0.329],
            vec![0.9, 0.91, 0.91, -1.0],
            vec![-0.2, -0.1, -0.3, -0.1],
        ];
        let mut expected = Vec::new();
        for r in &rows {
            let mut best = 0;
            let mut best_v = r[0];
            for (c, &v) in r.iter().enumerate() {
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            expected.push(best);
        }
        assert_eq!(predict(&Scores::from_rows(&rows)), expected);
        assert_eq!(expected, vec![2, 1, 1]);
    }

    #[test]
    fn single_class_fitness_is_one() {
        let (s, space) = store(
            &[vec![0.3, 0.7], vec![1.0, 0.2]],
            vec![0, 0],
            &[vec![1.0, 1.0]],
            &[0],
            1,
        );
        for alpha in [0.0, 1.0, 1e3] {
            let b = fitness(
                &s,
                &space,
                &CandidatePrompt::new([0], 1),
                ScoreParams { alpha, tau: 100.0 },
            )
            .unwrap();
            assert_eq!(b.accuracy, 1.0);
            assert_eq!(b.mean_true_logprob, 0.0);
            assert_eq!(b.fitness, 1.0);
        }
    }

    #[test]
    fn alpha_zero_fitness_is_accuracy() {
        let (s, space) = store(
            &[vec![1.0, 0.1], vec![0.2, 1.0], vec![1.0, 0.9]],
            vec![0, 1, 1],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0, 1],
            2,
        );
        let b = fitness(
            &s,
            &space,
            &CandidatePrompt::new([0], 2),
            ScoreParams { alpha: 0.0, tau: 100.0 },
        )
        .unwrap();
        assert_eq!(b.fitness, b.accuracy);
        assert_eq!(b.n_correct, 2);
        assert!((b.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn larger_margin_wins_at_equal_accuracy() {
        // two classes, tau 100: log p = -ln(1 + exp(-100 * margin))
        let lp = |m: f64| -(1.0 + (-100.0 * m).exp()).ln();
        let wide = Scores::from_rows(&[vec![0.5, 0.2]]);
        let narrow = Scores::from_rows(&[vec![0.5, 0.4]]);
        for alpha in [1e-3, 1.0, 1e3] {
            let p = ScoreParams { alpha, tau: 100.0 };
            let bw = breakdown(&wide, &[0], [0], p);
            let bn = breakdown(&narrow, &[0], [0], p);
            assert_eq!(bw.accuracy, bn.accuracy);
            assert!(bw.fitness > bn.fitness);
            assert!((bn.mean_true_logprob - lp(0.1)).abs() < 1e-12);
            assert!((bw.mean_true_logprob - lp(0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_at_large_tau() {
        let v = log_softmax_at(&[1.0, -1.0, 0.999], 1, 1e4);
        assert!(v.is_finite());
        assert!((v - (-2e4)).abs() < 1.0);
    }

    #[test]
    fn pcc_cases() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pcc(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&xs, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        // closed form: cov = 1.5... r = 3 / (sqrt(2) * sqrt(6)) = sqrt(3)/2
        assert!((pcc(&xs, &[2.0, 2.0, 5.0]).unwrap() - 0.866).abs() < 1e-3);
        assert!(matches!(pcc(&xs, &[1.0, 1.0, 1.0]), Err(Error::DegenerateVariance(_))));
        assert!(matches!(pcc(&[1.0], &[1.0]), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn validation_errors() {
        let (s, space) = store(
            &[vec![1.0, 0.0]],
            vec![0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0, 1],
            2,
        );
        assert!(matches!(
            class_scores(&s, &space, &CandidatePrompt::new([], 2)),
            Err(Error::EmptyCandidate)
        ));
        assert!(matches!(
            class_scores(&s, &space, &CandidatePrompt::new([3], 2)),
            Err(Error::UnknownTemplate(3))
        ));
        let mut wrong_class = CandidatePrompt::new([0], 2);
        wrong_class.desc_ids[0].insert(1);
        assert!(matches!(
            class_scores(&s, &space, &wrong_class),
            Err(Error::UnboundId(1))
        ));
        let mut oob = CandidatePrompt::new([0], 2);
        oob.desc_ids[1].insert(99);
        assert!(matches!(class_scores(&s, &space, &oob), Err(Error::UnboundId(99))));
    }

    #[test]
    fn candidate_equality_ignores_tag() {
        let a = CandidatePrompt::new([0, 1], 2).with_tag(3);
        let b = CandidatePrompt::new([1, 0], 2).with_tag(9);
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let mut c = b.clone();
        c.desc_ids[1].insert(4);
        assert_ne!(a, c);
        assert_ne!(a.digest(), c.digest());
    }

    fn random_world(seed: u64) -> (EmbeddingStore, PromptSpace) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let n_classes = 3;
        let images: Vec<Vec<f32>> = (0..7)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels = (0..7).map(|i| (i % n_classes) as u32).collect();
        let classes: Vec<usize> = (0..18).map(|i| i % n_classes).collect();
        let texts: Vec<Vec<f32>> = classes
            .iter()
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        store(&images, labels, &texts, &classes, n_classes)
    }

    #[test]
    fn cache_tracks_deltas() {
        let (s, space) = random_world(7);
        let ev = Evaluator::new(&s, &space, ScoreParams::default());
        let base = CandidatePrompt::new([0], 3);
        let mut cache = ev.make_cache(&base).unwrap();
        let before = cache.scores();

        cache.apply_delta(1, &[], &[]).unwrap();
        assert_eq!(cache.scores(), before);

        cache.apply_delta(1, &[4, 7], &[]).unwrap();
        cache.apply_delta(1, &[], &[4, 7]).unwrap();
        let after = cache.scores();
        for i in 0..after.n_rows() {
            for c in 0..3 {
                assert!((after.get(i, c) - before.get(i, c)).abs() <= 1e-12);
            }
        }

        assert!(matches!(
            cache.apply_delta(1, &[], &[10]),
            Err(Error::RemoveAbsent { class: 1, id: 10 })
        ));
        assert!(matches!(cache.apply_delta(1, &[5], &[]), Err(Error::UnboundId(5))));
    }

    #[test]
    fn preview_matches_applied_delta() {
        let (s, space) = random_world(11);
        let ev = Evaluator::new(&s, &space, ScoreParams::default());
        let cache = ev.make_cache(&CandidatePrompt::new([0], 3)).unwrap();
        let rows: Vec<usize> = (0..s.n_images()).collect();
        let preview = cache.preview_delta(2, &[5, 8], &[], &rows).unwrap();
        let mut applied = cache.clone();
        applied.apply_delta(2, &[5, 8], &[]).unwrap();
        assert_eq!(preview, applied.breakdown());
        let sub = [1usize, 4];
        assert_eq!(
            cache.preview_delta(2, &[5, 8], &[], &sub).unwrap(),
            applied.breakdown_on(&sub)
        );
    }

    #[test]
    fn evaluator_agrees_with_direct_path() {
        let (s, space) = random_world(3);
        let ev = Evaluator::new(&s, &space, ScoreParams::default());
        let mut cand = CandidatePrompt::new([0], 3);
        cand.desc_ids[0].extend([3, 6]);
        cand.desc_ids[2].insert(5);
        assert_eq!(ev.scores(&cand).unwrap(), class_scores(&s, &space, &cand).unwrap());
        assert_eq!(
            ev.evaluate(&cand).unwrap(),
            fitness(&s, &space, &cand, ScoreParams::default()).unwrap()
        );
    }

    proptest! {
        #[test]
        fn argmax_is_scale_invariant(row in prop::collection::vec(-1.0f64..1.0, 1..8), k in 0.01f64..100.0) {
            let scaled: Vec<f64> = row.iter().map(|v| v * k).collect();
            prop_assert_eq!(argmax(&row), argmax(&scaled));
        }

        #[test]
        fn mean_decomposes_over_disjoint_sets(seed in 0u64..500, split in 1usize..4) {
            let (s, space) = random_world(seed);
            let all: Vec<usize> = (0..18).filter(|i| i % 3 == 1 && *i != 1).collect();
            let (a, b) = all.split_at(split.min(all.len() - 1));
            let mut ca = CandidatePrompt::new([0], 3);
            ca.desc_ids[1].extend(a.iter().copied());
            let mut cb = CandidatePrompt::new([0], 3);
            cb.desc_ids[1].extend(b.iter().copied());
            let mut cab = CandidatePrompt::new([0], 3);
            cab.desc_ids[1].extend(all.iter().copied());
            // the template text sits in every D(c); account for it once
            let sa = class_scores(&s, &space, &ca).unwrap();
            let sb = class_scores(&s, &space, &cb).unwrap();
            let sab = class_scores(&s, &space, &cab).unwrap();
            let na = a.len() as f64 + 1.0;
            let nb = b.len() as f64 + 1.0;
            let tmpl = CandidatePrompt::new([0], 3);
            let st = class_scores(&s, &space, &tmpl).unwrap();
            for i in 0..s.n_images() {
                let expected = (na * sa.get(i, 1) + nb * sb.get(i, 1) - st.get(i, 1))
                    / (na + nb - 1.0);
                prop_assert!((sab.get(i, 1) - expected).abs() <= 1e-9);
            }
        }

        #[test]
        fn logprob_nonpositive_and_accuracy_integral(seed in 0u64..500, tau in 1.0f64..200.0) {
            let (s, space) = random_world(seed);
            let mut cand = CandidatePrompt::new([0], 3);
            cand.desc_ids[(seed % 3) as usize].insert(3 + (seed % 3) as usize);
            let b = fitness(&s, &space, &cand, ScoreParams { alpha: 1.0, tau }).unwrap();
            prop_assert!(b.mean_true_logprob <= 0.0);
            prop_assert!((0.0..=1.0).contains(&b.accuracy));
            let k = b.accuracy * b.n_samples as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }

        #[test]
        fn raising_true_score_never_lowers_fitness(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
            bump in 0.0f64..0.5,
            which in 0usize..6,
            alpha in 0.0f64..1e3,
        ) {
            let labels: Vec<u32> = (0..rows.len()).map(|i| (i % 3) as u32).collect();
            let i = which % rows.len();
            let mut raised = rows.clone();
            raised[i][labels[i] as usize] += bump;
            let p = ScoreParams { alpha, tau: 100.0 };
            let before = breakdown(&Scores::from_rows(&rows), &labels, 0..rows.len(), p);
            let after = breakdown(&Scores::from_rows(&raised), &labels, 0..rows.len(), p);
            prop_assert!(after.fitness >= before.fitness - 1e-12 * (1.0 + alpha));
        }
    }
}
