//! Synthetic embedding worlds with a known best prompt.
//!
//! Class `c` owns the basis direction `e_c`. Images are `e_c` plus isotropic
//! Gaussian noise. Template instances are generic: a class component plus
//! small random weight on every other class, which keeps them close to the
//! dataset mean direction. They also leak into the direction of a fixed
//! look-alike class (the same for every template, as with ambiguous class
//! names); one template leaks less than the rest. Planted descriptions sit
//! near `e_c`; every other description mixes two other class directions.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{ClassEntry, DescriptionEntry, EncodeManifest, LibrarySources, PromptLibrary, BASE_TEMPLATE};
use crate::store::{normalize_in_place, EmbeddingStore, ImageBundle, Matrix, TextBundle, TextMeta};

/// Leakage scale of the planted template and the range for the others.
const CLEAN_LEAK: f64 = 0.3;
const LEAK_RANGE: (f64, f64) = (0.5, 0.9);
const BASE_LEAK: f64 = 0.6;
/// Weight of the own-class direction in every template instance.
const CLASS_WEIGHT: f64 = 0.6;
/// Largest random leak of a template instance into unrelated classes.
const SPREAD: f64 = 0.15;
/// Off-class jitter of descriptions; keeps planted cosine with e_c >= 0.9.
const MAX_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_img_train: usize,
    pub n_img_test: usize,
    pub dim: usize,
    pub n_templates: usize,
    pub n_desc_per_class: usize,
    pub n_planted_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_img_train: 200,
            n_img_test: 200,
            dim: 64,
            n_templates: 8,
            n_desc_per_class: 20,
            n_planted_per_class: 4,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("n_img_train", self.n_img_train),
            ("n_img_test", self.n_img_test),
            ("dim", self.dim),
            ("n_templates", self.n_templates),
            ("n_desc_per_class", self.n_desc_per_class),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::SpecInvalid(format!("{name} must be positive")));
        }
        if self.n_planted_per_class > self.n_desc_per_class {
            return Err(Error::SpecInvalid(
                "n_planted_per_class exceeds n_desc_per_class".into(),
            ));
        }
        if self.dim < self.n_classes {
            return Err(Error::SpecInvalid("dim must be >= n_classes".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::SpecInvalid("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Index of the template with the least cross-class leakage.
    pub fn clean_template(&self) -> usize {
        3.min(self.n_templates - 1)
    }
}

/// Ground truth of a synthetic world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    /// Planted description text ids per class.
    pub planted: Vec<BTreeSet<usize>>,
    /// Planted description indices (into the class's description list).
    pub planted_descriptions: Vec<BTreeSet<usize>>,
    pub clean_template: usize,
}

impl AnswerKey {
    /// Mean over classes of the fraction of planted ids present in `selected`.
    /// Classes without planted descriptions are skipped.
    pub fn recall(&self, selected: &[BTreeSet<usize>]) -> f64 {
        let per_class: Vec<f64> = self
            .planted
            .iter()
            .zip(selected)
            .filter(|(p, _)| !p.is_empty())
            .map(|(p, s)| p.intersection(s).count() as f64 / p.len() as f64)
            .collect();
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub train: EmbeddingStore,
    pub test: EmbeddingStore,
    pub sources: LibrarySources,
    pub library: PromptLibrary,
    pub answer_key: AnswerKey,
}

impl SynthBenchmark {
    /// Answers an encode manifest for this world's library the way an
    /// encoder would: template instances map to their planted vectors and a
    /// description maps to the same vector whatever template it is
    /// integrated with.
    pub fn encode(&self, manifest: &EncodeManifest) -> Result<TextBundle> {
        let texts = self.train.texts();
        let mut rows = Vec::with_capacity(manifest.len());
        let mut meta = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let variant = e.synonym_id.map_or(0, |s| s + 1);
            let id = match e.description_id {
                None => self.library.template_text(e.template_id, e.class_id, variant),
                Some(d) => self.library.description_text(e.class_id, d, 0),
            }
            .ok_or_else(|| Error::InvalidBundle(format!("manifest entry {} is not in this world", e.manifest_id)))?;
            rows.push(texts.row(id).to_vec());
            meta.push(TextMeta {
                kind: e.kind,
                class_id: e.class_id,
                template_id: Some(e.template_id),
                source_text: e.full_text.clone(),
            });
        }
        TextBundle::new(
            self.train.n_classes(),
            Matrix::from_rows(self.train.dim(), &rows)?,
            meta,
            Some(manifest.fingerprint.clone()),
        )
    }
}

struct World<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
    /// Look-alike class of each class.
    partner: Vec<Option<usize>>,
}

impl World<'_> {
    fn unit(&self, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.spec.dim];
        v[c] = 1.0;
        v
    }

    /// Random direction orthogonal to every class direction, scaled by `len`.
    fn off_class(&mut self, len: f64) -> Vec<f64> {
        let (n, dim) = (self.spec.n_classes, self.spec.dim);
        let mut v = vec![0.0; dim];
        if dim == n || len == 0.0 {
            return v;
        }
        let normal = Normal::new(0.0, 1.0).unwrap();
        for x in &mut v[n..] {
            *x = normal.sample(&mut self.rng);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x *= len / norm);
        }
        v
    }

    fn image(&mut self, c: usize) -> Vec<f64> {
        let mut v = self.unit(c);
        if self.spec.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.spec.noise_sigma).unwrap();
            for x in &mut v {
                *x += normal.sample(&mut self.rng);
            }
        }
        v
    }

    fn template_instance(&mut self, c: usize, leak: f64) -> Vec<f64> {
        let n = self.spec.n_classes;
        let mut v = vec![0.0; self.spec.dim];
        v[c] = CLASS_WEIGHT;
        for other in (0..n).filter(|&o| o != c) {
            v[other] += SPREAD * self.rng.random::<f64>();
        }
        if let Some(p) = self.partner[c] {
            v[p] += leak;
        }
        v
    }

    fn description(&mut self, c: usize, planted: bool) -> Vec<f64> {
        let n = self.spec.n_classes;
        let jitter = self.rng.random_range(0.0..MAX_JITTER);
        let mut v = self.off_class(jitter);
        if planted {
            v[c] += 1.0;
        } else {
            let others: Vec<usize> = (0..n).filter(|&o| o != c).collect();
            match others.len() {
                0 => {
                    // a lone class: confusers point away from every class
                    let away = self.off_class(1.0);
                    v.iter_mut().zip(away).for_each(|(x, a)| *x += a);
                }
                1 => v[others[0]] += 1.0,
                k => {
                    for i in sample(&mut self.rng, k, 2) {
                        v[others[i]] += 1.0;
                    }
                }
            }
        }
        v
    }
}

fn to_row(v: Vec<f64>) -> Result<Vec<f32>> {
    let mut r: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
    normalize_in_place(&mut r).map_err(|_| Error::SpecInvalid("degenerate synthetic row".into()))?;
    Ok(r)
}

pub fn template_strings(n: usize) -> Vec<String> {
    (0..n)
        .map(|t| match t {
            0 => BASE_TEMPLATE.to_string(),
            t => format!("a rendition {t} of the {{}}."),
        })
        .collect()
}

/// Builds a synthetic train/test world, its library (bound to the shared
/// text rows) and the planted answer key. Pure function of `spec`.
pub fn synth_benchmark(spec: &SynthSpec) -> Result<SynthBenchmark> {
    spec.validate()?;
    let n = spec.n_classes;
    let mut w = World {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        partner: vec![None; n],
    };

    let sources = LibrarySources {
        templates: template_strings(spec.n_templates),
        domains: vec![],
        classes: (0..n)
            .map(|c| ClassEntry {
                class_id: c,
                name: format!("class_{c}"),
                synonyms: vec![],
            })
            .collect(),
        descriptions: (0..n)
            .flat_map(|c| {
                (0..spec.n_desc_per_class).map(move |d| DescriptionEntry {
                    class_id: c,
                    text: format!("class_{c} trait {d}"),
                })
            })
            .collect(),
    };
    let mut library = PromptLibrary::new(sources.clone())?;

    // which descriptions are planted, per class
    let planted_descriptions: Vec<BTreeSet<usize>> = (0..n)
        .map(|_| {
            sample(&mut w.rng, spec.n_desc_per_class, spec.n_planted_per_class)
                .into_iter()
                .collect()
        })
        .collect();

    w.partner = (0..n)
        .map(|c| (n > 1).then(|| (c + w.rng.random_range(1..n)) % n))
        .collect();

    let clean = spec.clean_template();
    let leaks: Vec<f64> = (0..spec.n_templates)
        .map(|t| {
            if t == clean {
                CLEAN_LEAK
            } else if t == 0 {
                BASE_LEAK
            } else {
                w.rng.random_range(LEAK_RANGE.0..LEAK_RANGE.1)
            }
        })
        .collect();

    let manifest = library.instantiate_manifest(&[0])?;
    let mut rows = Vec::with_capacity(manifest.len());
    let mut meta = Vec::with_capacity(manifest.len());
    let mut planted = vec![BTreeSet::new(); n];
    for (id, e) in manifest.entries.iter().enumerate() {
        let v = match e.description_id {
            None => w.template_instance(e.class_id, leaks[e.template_id]),
            Some(d) => {
                let is_planted = planted_descriptions[e.class_id].contains(&d);
                if is_planted {
                    planted[e.class_id].insert(id);
                }
                w.description(e.class_id, is_planted)
            }
        };
        let g: f64 = std::env::var("OFFSET").ok().map(|x| x.parse().unwrap()).unwrap_or(0.0);
        let mut v = v;
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        if spec.dim > n {
            v[n] += g;
        }
        rows.push(to_row(v)?);
        meta.push(TextMeta {
            kind: e.kind,
            class_id: e.class_id,
            template_id: Some(e.template_id),
            source_text: e.full_text.clone(),
        });
    }
    let texts = TextBundle::new(
        n,
        Matrix::from_rows(spec.dim, &rows)?,
        meta,
        Some(manifest.fingerprint.clone()),
    )?;

    let images = |count: usize, w: &mut World| -> Result<ImageBundle> {
        let mut rows = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % n;
            rows.push(to_row(w.image(c))?);
            labels.push(c as u32);
        }
        ImageBundle::new(n, Matrix::from_rows(spec.dim, &rows)?, labels)
    };
    let train_images = images(spec.n_img_train, &mut w)?;
    let test_images = images(spec.n_img_test, &mut w)?;

    let train = EmbeddingStore::new(train_images, vec![texts.clone()])?;
    let test = EmbeddingStore::new(test_images, vec![texts])?;
    library.bind_embeddings(&manifest, &train, 0)?;

    Ok(SynthBenchmark {
        train,
        test,
        sources,
        library,
        answer_key: AnswerKey {
            planted,
            planted_descriptions,
            clean_template: clean,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{fitness, CandidatePrompt, ScoreParams};

    fn planted_candidate(b: &SynthBenchmark, templates: &[usize]) -> CandidatePrompt {
        let mut c = CandidatePrompt::new(templates.iter().copied(), b.answer_key.planted.len());
        c.desc_ids = b.answer_key.planted.clone();
        c
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = [
            SynthSpec {
                n_planted_per_class: 30,
                ..Default::default()
            },
            SynthSpec {
                dim: 5,
                ..Default::default()
            },
            SynthSpec {
                n_classes: 0,
                ..Default::default()
            },
            SynthSpec {
                noise_sigma: -1.0,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(matches!(synth_benchmark(&s), Err(Error::SpecInvalid(_))));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SynthSpec {
            n_img_train: 30,
            n_img_test: 30,
            seed: 5,
            ..Default::default()
        };
        let a = synth_benchmark(&spec).unwrap();
        let b = synth_benchmark(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.answer_key, b.answer_key);
        let c = synth_benchmark(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn noiseless_planted_candidate_is_perfect() {
        for seed in 0..5 {
            let spec = SynthSpec {
                n_planted_per_class: 1,
                noise_sigma: 0.0,
                n_img_train: 40,
                n_img_test: 40,
                seed,
                ..Default::default()
            };
            let b = synth_benchmark(&spec).unwrap();
            let space = b.library.prompt_space(false).unwrap();
            for t in 0..spec.n_templates {
                let cand = planted_candidate(&b, &[t]);
                let p = ScoreParams::default();
                assert_eq!(fitness(&b.train, &space, &cand, p).unwrap().accuracy, 1.0);
                assert_eq!(fitness(&b.test, &space, &cand, p).unwrap().accuracy, 1.0);
            }
        }
    }

    #[test]
    fn planted_descriptions_align_with_class() {
        let b = synth_benchmark(&SynthSpec {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let texts = b.train.texts();
        for (c, ids) in b.answer_key.planted.iter().enumerate() {
            assert_eq!(ids.len(), 4);
            for &id in ids {
                assert!(texts.row(id)[c] >= 0.9);
                assert_eq!(b.train.meta(id).unwrap().class_id, c);
            }
        }
        assert!(b.train.texts().max_norm_deviation() <= 1e-4);
        assert!(b.train.images().max_norm_deviation() <= 1e-4);
    }

    #[test]
    fn all_descriptions_lose_to_planted_only() {
        let spec = SynthSpec {
            seed: 2,
            ..Default::default()
        };
        let b = synth_benchmark(&spec).unwrap();
        let space = b.library.prompt_space(false).unwrap();
        let p = ScoreParams::default();
        let planted = planted_candidate(&b, &[0]);
        let mut all = CandidatePrompt::new([0], spec.n_classes);
        for c in 0..spec.n_classes {
            all.desc_ids[c] = b
                .library
                .description_pool(c, None, &BTreeSet::from([0]), false)
                .into_iter()
                .collect();
        }
        let a_planted = fitness(&b.test, &space, &planted, p).unwrap().accuracy;
        let a_all = fitness(&b.test, &space, &all, p).unwrap().accuracy;
        assert!(a_all < a_planted, "all={a_all} planted={a_planted}");
    }

    #[test]
    fn recall_counts_planted_hits() {
        let key = AnswerKey {
            planted: vec![BTreeSet::from([1, 2]), BTreeSet::from([5]), BTreeSet::new()],
            planted_descriptions: vec![],
            clean_template: 0,
        };
        let sel = vec![BTreeSet::from([1, 9]), BTreeSet::from([5]), BTreeSet::from([7])];
        assert!((key.recall(&sel) - 0.75).abs() < 1e-12);
    }
}
