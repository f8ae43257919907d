//! Syn-IS prompt collection: style templates × labels, prompt shift measurement and
//! the generation manifest handed to an external image generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::laid::{render_template, DecompositionMatrix, OBJECT_PLACEHOLDER};
use crate::shift::{measure_shifts, ShiftDegrees, SubsetIndex};

pub const DEFAULT_IMAGES_PER_SUBSET: usize = 5000;

const BUILTIN_STYLES: &str = include_str!("../data/sdxl_styles.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub name: String,
    #[serde(rename = "prompt")]
    pub prompt_template: String,
    pub negative_prompt: String,
}

/// The 51 bundled SDXL style templates.
pub fn builtin_styles() -> Vec<StyleTemplate> {
    serde_json::from_str(BUILTIN_STYLES).expect("bundled style file is valid")
}

pub fn load_styles(path: impl AsRef<Path>) -> Result<Vec<StyleTemplate>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let styles: Vec<StyleTemplate> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    validate_styles(&styles)?;
    Ok(styles)
}

pub fn validate_styles(styles: &[StyleTemplate]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in styles {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::validation(format!("duplicate style name {:?}", s.name)));
        }
        let n = s.prompt_template.matches(OBJECT_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::validation(format!(
                "style {:?} has {n} {OBJECT_PLACEHOLDER} placeholders, expected exactly one",
                s.name
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub label: String,
    pub style_name: String,
    pub rendered_prompt: String,
    pub negative_prompt: String,
}

impl PromptRecord {
    /// `"{style}::{label}"`, the id prompt features are stored under.
    pub fn id(&self) -> String {
        prompt_id(&self.style_name, &self.label)
    }
}

pub fn prompt_id(style_name: &str, label: &str) -> String {
    format!("{style_name}::{label}")
}

/// Style-major: all labels for the first style, then the second, ...
pub fn render_prompts(styles: &[StyleTemplate], labels: &[String]) -> Result<Vec<PromptRecord>> {
    if styles.is_empty() || labels.is_empty() {
        return Err(Error::validation("render_prompts needs at least one style and one label"));
    }
    validate_styles(styles)?;
    let mut seen = HashSet::new();
    if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
        return Err(Error::validation(format!("duplicate label {dup:?}")));
    }
    let mut out = Vec::with_capacity(styles.len() * labels.len());
    for s in styles {
        for label in labels {
            out.push(PromptRecord {
                label: label.clone(),
                style_name: s.name.clone(),
                rendered_prompt: render_template(&s.prompt_template, label)?,
                negative_prompt: s.negative_prompt.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct PromptLine<'a> {
    id: String,
    #[serde(flatten)]
    record: &'a PromptRecord,
}

/// One JSON object per line: the record fields plus its `id`.
pub fn write_prompts_jsonl(prompts: &[PromptRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in prompts {
        let line = serde_json::to_string(&PromptLine { id: p.id(), record: p }).map_err(|e| Error::json(path, e))?;
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_prompts_jsonl(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Non-fatal issues: empty or whitespace-only labels.
pub fn suspicious_prompts(prompts: &[PromptRecord]) -> Vec<String> {
    prompts
        .iter()
        .filter(|p| p.label.trim().is_empty())
        .map(|p| format!("{}: empty object label", p.id()))
        .collect()
}

/// Shift degrees of the prompts' text features against ID image features.
/// `prompt_features` must hold a record with id [`PromptRecord::id`] for every prompt.
pub fn measure_prompt_shift(
    prompts: &[PromptRecord],
    prompt_features: &EmbeddingStore,
    id_image_features: &EmbeddingStore,
    w: &DecompositionMatrix,
    k: usize,
) -> Result<ShiftDegrees> {
    let by_id: HashMap<&str, usize> = prompt_features
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut records = Vec::with_capacity(prompts.len());
    let mut missing = Vec::new();
    for p in prompts {
        let id = p.id();
        match by_id.get(id.as_str()) {
            Some(&i) => records.push(prompt_features.records()[i].clone()),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).collect();
        return Err(Error::validation(format!(
            "{} prompts have no text features, e.g. {shown:?}",
            missing.len()
        )));
    }
    let test = EmbeddingStore::new(prompt_features.dim(), records)?;
    measure_shifts(&test, id_image_features, w, k)
}

/// Whole-word, case-insensitive banned-term filter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BannedTermFilter {
    pub terms: Vec<String>,
}

impl Default for BannedTermFilter {
    fn default() -> Self {
        let terms = [
            "nsfw", "nude", "nudity", "naked", "porn", "pornographic", "explicit", "sexual", "erotic", "gore", "gory",
            "blood", "bloody", "corpse", "decapitated", "dismembered", "mutilated", "torture", "murder", "suicide",
            "massacre", "violence", "violent", "gun", "rifle", "pistol", "weapon", "bomb",
        ];
        Self {
            terms: terms.iter().map(|t| t.to_string()).collect(),
        }
    }
}

impl BannedTermFilter {
    pub fn new(terms: Vec<String>) -> Self {
        Self {
            terms: terms.into_iter().map(|t| t.to_lowercase()).collect(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        ))
    }

    /// First banned term found in `text`, if any. Terms match whole words; a
    /// multi-word term matches a run of consecutive words.
    pub fn find(&self, text: &str) -> Option<&str> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '-')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let joined = format!(" {} ", words.join(" "));
        self.terms.iter().map(String::as_str).find(|t| {
            let phrase: Vec<&str> = t.split_whitespace().collect();
            !phrase.is_empty() && joined.contains(&format!(" {} ", phrase.join(" ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPrompt {
    pub id: String,
    pub prompt: String,
    pub negative_prompt: String,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub level_sem: usize,
    pub level_cov: usize,
    pub target: usize,
    pub na: bool,
    /// Prompts in the cell that passed the filter, before sampling.
    pub available_prompts: usize,
    pub prompts: Vec<ManifestPrompt>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredPrompt {
    pub id: String,
    pub term: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub per_subset_target: usize,
    pub seed: u64,
    pub cells: Vec<ManifestCell>,
    pub filter_report: Vec<FilteredPrompt>,
}

impl GenerationManifest {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Splits `target` images over a cell's prompts. With more prompts than images a
/// seeded uniform sample of `target` prompts gets one image each; otherwise every
/// prompt gets `target / n` and a seeded sample of the remainder gets one extra.
fn allocate(n_prompts: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts = vec![target / n_prompts; n_prompts];
    let extra = target % n_prompts;
    let mut order: Vec<usize> = (0..n_prompts).collect();
    order.shuffle(rng);
    for &i in &order[..extra] {
        counts[i] += 1;
    }
    counts
}

/// Builds the per-cell generation manifest. Index ids are prompt ids; prompts hit by
/// `filter` are dropped and reported. N/A cells get target 0 and no prompts.
pub fn export_generation_manifest(
    index: &SubsetIndex,
    prompts: &[PromptRecord],
    per_subset_target: usize,
    filter: &BannedTermFilter,
    seed: u64,
) -> Result<GenerationManifest> {
    let by_id: BTreeMap<String, &PromptRecord> = prompts.iter().map(|p| (p.id(), p)).collect();
    let mut filter_report = Vec::new();
    let mut banned = HashSet::new();
    for p in prompts {
        if let Some(term) = filter.find(&p.rendered_prompt).or_else(|| filter.find(&p.label)) {
            filter_report.push(FilteredPrompt {
                id: p.id(),
                term: term.to_string(),
            });
            banned.insert(p.id());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for (s, c, ids) in index.iter_cells() {
        let na = index.is_na(s, c);
        let mut usable = Vec::new();
        for id in ids {
            let p = by_id
                .get(id)
                .ok_or_else(|| Error::validation(format!("subset cell ({s},{c}) names unknown prompt {id:?}")))?;
            if !banned.contains(id) {
                usable.push(*p);
            }
        }
        let target = if na { 0 } else { per_subset_target };
        let mut listed = Vec::new();
        if target > 0 {
            if usable.is_empty() {
                return Err(Error::validation(format!(
                    "cell ({s},{c}) needs {target} images but has no usable prompts"
                )));
            }
            for (p, images) in usable.iter().zip(allocate(usable.len(), target, &mut rng)) {
                if images > 0 {
                    listed.push(ManifestPrompt {
                        id: p.id(),
                        prompt: p.rendered_prompt.clone(),
                        negative_prompt: p.negative_prompt.clone(),
                        images,
                    });
                }
            }
        }
        cells.push(ManifestCell {
            level_sem: s,
            level_cov: c,
            target,
            na,
            available_prompts: usable.len(),
            prompts: listed,
        });
    }
    Ok(GenerationManifest {
        per_subset_target,
        seed,
        cells,
        filter_report,
    })
}
