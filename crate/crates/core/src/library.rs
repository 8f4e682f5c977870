//! Template, domain, synonym and description libraries, the encode manifest
//! protocol, and binding of encoded rows back to library elements.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scoring::PromptSpace;
use crate::store::{EmbeddingStore, TextKind};

pub const PLACEHOLDER: &str = "{}";
pub const BASE_TEMPLATE: &str = "a photo of a {}.";

fn photo_word() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bphoto\b").expect("valid regex"))
}

fn check_placeholder(t: &str) -> Result<()> {
    if t.matches(PLACEHOLDER).count() == 1 {
        Ok(())
    } else {
        Err(Error::NoPlaceholder(t.to_string()))
    }
}

/// Adds domain information to templates in four ways: a ", a type of
/// {domain}" suffix, a "{domain}: " prefix on the class slot, and (only when
/// the word "photo" occurs) "photo" -> "{domain}" and "photo" -> "{domain}
/// photo". Originals come first; duplicates are dropped. Templates that
/// already mention one of the domains are not rewritten.
pub fn augment_templates(templates: &[String], domains: &[String]) -> Result<Vec<String>> {
    for t in templates {
        check_placeholder(t)?;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |s: String, out: &mut Vec<String>| {
        if s.matches(PLACEHOLDER).count() == 1 && seen.insert(s.clone()) {
            out.push(s);
        }
    };
    for t in templates {
        push(t.clone(), &mut out);
    }
    let domains: Vec<&str> = domains.iter().map(|d| d.trim()).filter(|d| !d.is_empty()).collect();
    for t in templates {
        if domains.iter().any(|d| t.contains(d)) {
            continue;
        }
        for &d in &domains {
            let suffixed = match t.strip_suffix('.') {
                Some(stem) => format!("{stem}, a type of {d}."),
                None => format!("{t}, a type of {d}"),
            };
            push(suffixed, &mut out);
            push(t.replacen(PLACEHOLDER, &format!("{d}: {PLACEHOLDER}"), 1), &mut out);
            if photo_word().is_match(t) {
                push(photo_word().replace_all(t, d).into_owned(), &mut out);
                push(photo_word().replace_all(t, format!("{d} photo")).into_owned(), &mut out);
            }
        }
    }
    Ok(out)
}

/// Fills the class slot of a template.
pub fn instantiate(template: &str, name: &str) -> String {
    template.replacen(PLACEHOLDER, name, 1)
}

/// Joins an instantiated template and a description as "{template}. {description}."
pub fn integrate(template_text: &str, description: &str) -> String {
    let t = template_text.trim().trim_end_matches('.');
    let d = description.trim().trim_end_matches('.');
    format!("{t}. {d}.")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: usize,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub class_id: usize,
    pub text: String,
}

/// The raw library inputs, as read from JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LibrarySources {
    pub templates: Vec<String>,
    #[serde(default)]
    pub domains: Vec<String>,
    pub classes: Vec<ClassEntry>,
    #[serde(default)]
    pub descriptions: Vec<DescriptionEntry>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl LibrarySources {
    /// Reads `templates.json`, `domains.json`, `classes.json` and
    /// `descriptions.json`. Missing domain/description files mean empty.
    pub fn from_files(
        templates: &Path,
        domains: Option<&Path>,
        classes: &Path,
        descriptions: Option<&Path>,
    ) -> Result<Self> {
        Ok(Self {
            templates: read_json(templates)?,
            domains: domains.map(read_json).transpose()?.unwrap_or_default(),
            classes: read_json(classes)?,
            descriptions: descriptions.map(read_json).transpose()?.unwrap_or_default(),
        })
    }

    /// Reads a single combined `library.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("library serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub manifest_id: usize,
    pub kind: TextKind,
    pub class_id: usize,
    pub template_id: usize,
    #[serde(default)]
    pub description_id: Option<usize>,
    #[serde(default)]
    pub synonym_id: Option<usize>,
    pub full_text: String,
}

/// Ordered list of texts to encode, with a SHA-256 fingerprint over the
/// newline-joined texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeManifest {
    pub fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}

impl EncodeManifest {
    fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let fingerprint = fingerprint(entries.iter().map(|e| e.full_text.as_str()));
        Self { fingerprint, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.entries.iter().enumerate().any(|(i, e)| e.manifest_id != i) {
            return Err(Error::InvalidBundle(format!(
                "{}: manifest ids are not dense",
                path.display()
            )));
        }
        let fp = fingerprint(m.entries.iter().map(|e| e.full_text.as_str()));
        if fp != m.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: m.fingerprint,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

pub fn fingerprint<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for (i, t) in texts.into_iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Binding {
    /// [template][class][variant] where variant 0 is the class name and
    /// variant i > 0 is synonym i - 1.
    templates: Vec<Vec<Vec<Option<usize>>>>,
    /// [class][description] -> integration template -> text id
    descriptions: Vec<Vec<BTreeMap<usize, usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLibrary {
    templates: Vec<String>,
    domains: Vec<String>,
    class_names: Vec<String>,
    synonyms: Vec<Vec<String>>,
    descriptions: Vec<Vec<String>>,
    binding: Binding,
}

impl PromptLibrary {
    /// Builds the library; templates are augmented with the domain strings.
    pub fn new(sources: LibrarySources) -> Result<Self> {
        if sources.templates.is_empty() {
            return Err(Error::EmptyLibrary("no templates".into()));
        }
        if sources.classes.is_empty() {
            return Err(Error::EmptyLibrary("no classes".into()));
        }
        let n = sources.classes.len();
        let mut class_names = vec![None; n];
        let mut synonyms = vec![Vec::new(); n];
        for c in sources.classes {
            if c.class_id >= n || class_names[c.class_id].is_some() {
                return Err(Error::Config(format!(
                    "class ids must be dense 0..{n}; got {}",
                    c.class_id
                )));
            }
            class_names[c.class_id] = Some(c.name);
            synonyms[c.class_id] = c.synonyms;
        }
        let class_names: Vec<String> = class_names.into_iter().map(Option::unwrap).collect();
        let mut descriptions = vec![Vec::new(); n];
        for d in sources.descriptions {
            if d.class_id >= n {
                return Err(Error::Config(format!("description for unknown class {}", d.class_id)));
            }
            descriptions[d.class_id].push(d.text);
        }
        let templates = augment_templates(&sources.templates, &sources.domains)?;
        let binding = Binding {
            templates: templates
                .iter()
                .map(|_| synonyms.iter().map(|s| vec![None; 1 + s.len()]).collect())
                .collect(),
            descriptions: descriptions.iter().map(|d| vec![BTreeMap::new(); d.len()]).collect(),
        };
        Ok(Self {
            templates,
            domains: sources.domains,
            class_names,
            synonyms,
            descriptions,
            binding,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
    pub fn templates(&self) -> &[String] {
        &self.templates
    }
    pub fn domains(&self) -> &[String] {
        &self.domains
    }
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
    pub fn synonyms(&self, class: usize) -> &[String] {
        &self.synonyms[class]
    }
    pub fn descriptions(&self, class: usize) -> &[String] {
        &self.descriptions[class]
    }

    /// Index of the "a photo of a {}." template, falling back to the first.
    pub fn base_template(&self) -> usize {
        self.templates.iter().position(|t| t == BASE_TEMPLATE).unwrap_or(0)
    }

    fn template_entries(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for (t, tmpl) in self.templates.iter().enumerate() {
            for (c, name) in self.class_names.iter().enumerate() {
                out.push(ManifestEntry {
                    manifest_id: 0,
                    kind: TextKind::TemplateInstance,
                    class_id: c,
                    template_id: t,
                    description_id: None,
                    synonym_id: None,
                    full_text: instantiate(tmpl, name),
                });
                for (s, syn) in self.synonyms[c].iter().enumerate() {
                    out.push(ManifestEntry {
                        manifest_id: 0,
                        kind: TextKind::SynonymInstance,
                        class_id: c,
                        template_id: t,
                        description_id: None,
                        synonym_id: Some(s),
                        full_text: instantiate(tmpl, syn),
                    });
                }
            }
        }
        out
    }

    fn description_entries(&self, integration: &[usize]) -> Result<Vec<ManifestEntry>> {
        let mut out = Vec::new();
        for &t in integration {
            let tmpl = self
                .templates
                .get(t)
                .ok_or_else(|| Error::Config(format!("integration template {t} out of range")))?;
            for (c, name) in self.class_names.iter().enumerate() {
                let head = instantiate(tmpl, name);
                for (d, desc) in self.descriptions[c].iter().enumerate() {
                    out.push(ManifestEntry {
                        manifest_id: 0,
                        kind: TextKind::Description,
                        class_id: c,
                        template_id: t,
                        description_id: Some(d),
                        synonym_id: None,
                        full_text: integrate(&head, desc),
                    });
                }
            }
        }
        Ok(out)
    }

    fn finish(mut entries: Vec<ManifestEntry>) -> Result<EncodeManifest> {
        if entries.is_empty() {
            return Err(Error::EmptyLibrary("manifest would be empty".into()));
        }
        for (i, e) in entries.iter_mut().enumerate() {
            e.manifest_id = i;
        }
        Ok(EncodeManifest::from_entries(entries))
    }

    /// Every (template, class, name variant) text followed by every
    /// (integration template, class, description) text.
    pub fn instantiate_manifest(&self, integration: &[usize]) -> Result<EncodeManifest> {
        let mut entries = self.template_entries();
        entries.extend(self.description_entries(integration)?);
        Self::finish(entries)
    }

    /// Template and synonym instances only.
    pub fn template_manifest(&self) -> Result<EncodeManifest> {
        Self::finish(self.template_entries())
    }

    /// Descriptions integrated with the given templates only.
    pub fn description_manifest(&self, integration: &[usize]) -> Result<EncodeManifest> {
        Self::finish(self.description_entries(integration)?)
    }

    /// Binds each manifest entry to the matching row of text segment
    /// `segment` of `store`.
    pub fn bind_embeddings(&mut self, manifest: &EncodeManifest, store: &EmbeddingStore, segment: usize) -> Result<()> {
        let range = store
            .segment(segment)
            .ok_or_else(|| Error::MissingInput(format!("text segment {segment}")))?;
        if range.len() != manifest.len() {
            return Err(Error::CountMismatch {
                manifest: manifest.len(),
                rows: range.len(),
            });
        }
        let found = store.segment_fingerprint(segment).unwrap_or("<none>");
        if found != manifest.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: manifest.fingerprint.clone(),
                found: found.to_string(),
            });
        }
        // validate everything before mutating
        for e in &manifest.entries {
            let bad = || Error::InvalidBundle(format!("manifest entry {} out of range", e.manifest_id));
            if e.class_id >= self.n_classes() || e.template_id >= self.templates.len() {
                return Err(bad());
            }
            match e.kind {
                TextKind::Description => {
                    let d = e.description_id.ok_or_else(bad)?;
                    if d >= self.descriptions[e.class_id].len() {
                        return Err(bad());
                    }
                }
                TextKind::SynonymInstance => {
                    let s = e.synonym_id.ok_or_else(bad)?;
                    if s >= self.synonyms[e.class_id].len() {
                        return Err(bad());
                    }
                }
                TextKind::TemplateInstance => {}
            }
        }
        for (e, text_id) in manifest.entries.iter().zip(range) {
            match e.kind {
                TextKind::TemplateInstance => {
                    self.binding.templates[e.template_id][e.class_id][0] = Some(text_id);
                }
                TextKind::SynonymInstance => {
                    let s = e.synonym_id.unwrap();
                    self.binding.templates[e.template_id][e.class_id][1 + s] = Some(text_id);
                }
                TextKind::Description => {
                    let d = e.description_id.unwrap();
                    self.binding.descriptions[e.class_id][d].insert(e.template_id, text_id);
                }
            }
        }
        Ok(())
    }

    /// True when every (template, class, variant) text is bound.
    pub fn templates_bound(&self) -> bool {
        self.binding.templates.iter().flatten().flatten().all(Option::is_some)
    }

    /// True when every description is bound for every integration template
    /// in `integration`.
    pub fn descriptions_bound(&self, integration: &[usize]) -> bool {
        self.binding
            .descriptions
            .iter()
            .flatten()
            .all(|m| integration.iter().all(|t| m.contains_key(t)))
    }

    /// Integration templates for which at least one description is bound.
    pub fn bound_integrations(&self) -> BTreeSet<usize> {
        self.binding
            .descriptions
            .iter()
            .flatten()
            .flat_map(|m| m.keys().copied())
            .collect()
    }

    /// Text id of template `template` instantiated for `class`; variant 0 is
    /// the class name, variant i > 0 synonym i - 1.
    pub fn template_text(&self, template: usize, class: usize, variant: usize) -> Option<usize> {
        *self.binding.templates.get(template)?.get(class)?.get(variant)?
    }

    /// Text id of description `description` of `class` integrated with
    /// template `integration`.
    pub fn description_text(&self, class: usize, description: usize, integration: usize) -> Option<usize> {
        self.binding
            .descriptions
            .get(class)?
            .get(description)?
            .get(&integration)
            .copied()
    }

    /// Resolved text ids of each template's instances per class. With
    /// `with_synonyms`, synonym variants join the class-name instance.
    pub fn prompt_space(&self, with_synonyms: bool) -> Result<PromptSpace> {
        let mut table = Vec::with_capacity(self.templates.len());
        for (t, per_class) in self.binding.templates.iter().enumerate() {
            let mut row = Vec::with_capacity(per_class.len());
            for (c, variants) in per_class.iter().enumerate() {
                let take = if with_synonyms { variants.len() } else { 1 };
                let ids = variants[..take]
                    .iter()
                    .map(|v| v.ok_or_else(|| Error::MissingInput(format!("template {t} unbound for class {c}"))))
                    .collect::<Result<Vec<_>>>()?;
                row.push(ids);
            }
            table.push(row);
        }
        Ok(PromptSpace::new(table))
    }

    /// Bound text ids available to class `class` during description search:
    /// its descriptions integrated with any of `integration` (all bound
    /// integrations when `None`), plus synonym instances of `templates` unless
    /// synonyms already ride along with template instances.
    pub fn description_pool(
        &self,
        class: usize,
        integration: Option<&BTreeSet<usize>>,
        templates: &BTreeSet<usize>,
        synonyms_in_templates: bool,
    ) -> Vec<usize> {
        let mut ids = BTreeSet::new();
        for m in &self.binding.descriptions[class] {
            for (t, &id) in m {
                if integration.is_none_or(|set| set.contains(t)) {
                    ids.insert(id);
                }
            }
        }
        if !synonyms_in_templates {
            for &t in templates {
                if let Some(variants) = self.binding.templates.get(t).map(|v| &v[class]) {
                    ids.extend(variants[1..].iter().flatten().copied());
                }
            }
        }
        ids.into_iter().collect()
    }
}
