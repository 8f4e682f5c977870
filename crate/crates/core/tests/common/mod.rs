//! Shared fixtures and brute-force reference implementations for the
//! integration tests.
#![allow(dead_code)]

use std::path::Path;

use promptevo::driver::{LibraryFiles, RunConfig};
use promptevo::scoring::{CandidatePrompt, PromptSpace};
use promptevo::store::{save_bundle, Bundle, EmbeddingStore, ImageBundle, Matrix, TextBundle, TextKind, TextMeta};
use promptevo::synth::SynthBenchmark;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn unit_row(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// A random store with one text per (template, class) followed by
/// `descs[c]` descriptions for each class.
pub struct World {
    pub store: EmbeddingStore,
    pub space: PromptSpace,
    /// Description text ids per class.
    pub pools: Vec<Vec<usize>>,
}

pub fn random_world(
    rng: &mut impl Rng,
    n_classes: usize,
    n_images: usize,
    n_templates: usize,
    descs: &[usize],
    dim: usize,
) -> World {
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    let mut table = vec![vec![Vec::new(); n_classes]; n_templates];
    for (t, per_class) in table.iter_mut().enumerate() {
        for (c, ids) in per_class.iter_mut().enumerate() {
            ids.push(rows.len());
            rows.push(unit_row(rng, dim));
            meta.push(TextMeta {
                kind: TextKind::TemplateInstance,
                class_id: c,
                template_id: Some(t),
                source_text: format!("t{t} c{c}"),
            });
        }
    }
    let mut pools = vec![Vec::new(); n_classes];
    for (c, &k) in descs.iter().enumerate() {
        for d in 0..k {
            pools[c].push(rows.len());
            rows.push(unit_row(rng, dim));
            meta.push(TextMeta {
                kind: TextKind::Description,
                class_id: c,
                template_id: Some(0),
                source_text: format!("c{c} d{d}"),
            });
        }
    }
    let texts = TextBundle::new(n_classes, Matrix::from_rows(dim, &rows).unwrap(), meta, None).unwrap();
    let images: Vec<Vec<f32>> = (0..n_images).map(|_| unit_row(rng, dim)).collect();
    let labels: Vec<u32> = (0..n_images).map(|_| rng.random_range(0..n_classes as u32)).collect();
    let images = ImageBundle::new(n_classes, Matrix::from_rows(dim, &images).unwrap(), labels).unwrap();
    World {
        store: EmbeddingStore::new(images, vec![texts]).unwrap(),
        space: PromptSpace::new(table),
        pools,
    }
}

/// Random non-empty template subset plus random description subsets.
pub fn random_candidate(rng: &mut impl Rng, n_templates: usize, pools: &[Vec<usize>]) -> CandidatePrompt {
    let mut templates: Vec<usize> = (0..n_templates).filter(|_| rng.random_bool(0.5)).collect();
    if templates.is_empty() {
        templates.push(rng.random_range(0..n_templates));
    }
    let mut cand = CandidatePrompt::new(templates, pools.len());
    for (c, pool) in pools.iter().enumerate() {
        cand.desc_ids[c] = pool.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    }
    cand
}

/// Class scores computed text by text with plain loops.
pub fn reference_scores(store: &EmbeddingStore, space: &PromptSpace, cand: &CandidatePrompt) -> Vec<Vec<f64>> {
    let n = store.n_classes();
    (0..store.n_images())
        .map(|i| {
            let img = store.images().row(i);
            (0..n)
                .map(|c| {
                    let mut ids: Vec<usize> = Vec::new();
                    for &t in &cand.template_ids {
                        ids.extend_from_slice(space.ids(t, c));
                    }
                    ids.extend(cand.desc_ids[c].iter().copied());
                    if ids.is_empty() {
                        return 0.0;
                    }
                    let mut total = 0.0f64;
                    for &id in &ids {
                        let txt = store.texts().row(id);
                        let mut d = 0.0f64;
                        for k in 0..img.len() {
                            d += img[k] as f64 * txt[k] as f64;
                        }
                        total += d;
                    }
                    total / ids.len() as f64
                })
                .collect()
        })
        .collect()
}

pub fn reference_predict(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// (accuracy, mean true-class log-probability, fitness).
pub fn reference_fitness(scores: &[Vec<f64>], labels: &[u32], alpha: f64, tau: f64) -> (f64, f64, f64) {
    let pred = reference_predict(scores);
    let correct = pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    let acc = correct as f64 / labels.len() as f64;
    let mut lp = 0.0;
    for (row, &y) in scores.iter().zip(labels) {
        let z: f64 = row.iter().map(|s| (tau * s).exp()).sum();
        lp += tau * row[y as usize] - z.ln();
    }
    lp /= labels.len() as f64;
    (acc, lp, acc + alpha * lp)
}

/// Saves a synthetic benchmark's train images, texts and library into `dir`
/// and returns a run config over them.
pub fn write_synth(dir: &Path, b: &SynthBenchmark) -> RunConfig {
    std::fs::create_dir_all(dir).unwrap();
    save_bundle(&Bundle::Image(b.train.image_bundle()), dir.join("train.bin")).unwrap();
    save_bundle(&Bundle::Image(b.test.image_bundle()), dir.join("test.bin")).unwrap();
    save_bundle(&Bundle::Text(b.train.text_bundle(0).unwrap()), dir.join("texts.bin")).unwrap();
    b.sources.save(&dir.join("library.json")).unwrap();
    let mut cfg = RunConfig::new(
        dir.join("train.bin"),
        vec![dir.join("texts.bin")],
        LibraryFiles::combined(dir.join("library.json")),
    );
    cfg.output_dir = dir.join("run");
    cfg
}
