//! Deterministic synthetic cross-modal corpus, dataset manifests, and
//! vocabulary construction.
//!
//! Every record pairs a glyph-grid image with a report composed from
//! per-glyph templates in grid reading order, so the report is exactly
//! recoverable from the image through a glyph-to-words lookup. Abnormal
//! cells invert their glyph's pixels and contribute a finding word, which
//! doubles as the record's ground-truth label.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{tokenize, LabelRule, RuleTable};
use crate::model::{Sample, SourceInput};
use crate::tokens;
use crate::visual::{self, RasterImage};

/// Glyph cell edge in pixels; one rendered cell is one patch at the default
/// patch size.
pub const CELL: usize = 4;
pub const GLYPH_COUNT: usize = 12;

pub const GLYPH_WORDS: [&str; GLYPH_COUNT] = [
    "arch", "bloom", "crest", "drift", "ember", "flint", "grove", "haven", "inlet", "knoll",
    "marsh", "notch",
];

pub const FINDING_WORDS: [&str; GLYPH_COUNT] = [
    "blur", "clouding", "dimming", "fray", "grain", "mottle", "ripple", "scatter", "smudge",
    "speck", "streak", "veil",
];

pub const SEVERITY_WORDS: [&str; 3] = ["mild", "moderate", "severe"];

/// 4x4 pixel patterns, one per glyph; bit `r*4+c` drives pixel `(r, c)`.
/// All 12 patterns and their bitwise inversions are pairwise distinct, so
/// rendering is injective over (glyph, abnormal).
pub const GLYPH_PATTERNS: [u16; GLYPH_COUNT] = [
    0x0F96, 0x3C5A, 0x6B2D, 0x9E71, 0xA5C3, 0x1BD8, 0xE407, 0x52F9, 0x8D36, 0x47EB, 0xB812,
    0x29A4,
];

const GLYPH_LO: f64 = 0.15;
const GLYPH_HI: f64 = 0.55;
const POSITION_BIT: f64 = 0.25;

/// Bits needed to watermark `total` cell positions.
fn position_bit_count(total: usize) -> usize {
    let mut bits = 1;
    while (1usize << bits) < total {
        bits += 1;
    }
    bits
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub glyph: usize,
    pub abnormal: bool,
}

/// Square grid of glyph cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridWorld {
    pub size: usize,
    pub cells: Vec<GridCell>,
}

impl GridWorld {
    pub fn sample(size: usize, abnormal_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let cells = (0..size * size)
            .map(|_| GridCell {
                glyph: rng.gen_range(0..GLYPH_COUNT),
                abnormal: rng.gen::<f64>() < abnormal_rate,
            })
            .collect();
        GridWorld { size, cells }
    }

    /// Render to a `size*CELL` square image. Abnormal cells invert their
    /// glyph's intensity. Every pixel additionally carries one bit of the
    /// cell's reading-order index as a low-contrast watermark, so patch
    /// content alone determines position (the model sees no visual
    /// positional encodings).
    pub fn render(&self) -> RasterImage {
        let edge = self.size * CELL;
        let bits = position_bit_count(self.cells.len());
        let mut pixels = vec![0.0; edge * edge];
        for (i, cell) in self.cells.iter().enumerate() {
            let (cy, cx) = (i / self.size, i % self.size);
            let pattern = GLYPH_PATTERNS[cell.glyph];
            for r in 0..CELL {
                for c in 0..CELL {
                    let pixel = r * CELL + c;
                    let mut on = pattern >> pixel & 1 == 1;
                    if cell.abnormal {
                        on = !on;
                    }
                    let base = if on { GLYPH_HI } else { GLYPH_LO };
                    let bit = (i >> (pixel % bits)) & 1;
                    pixels[(cy * CELL + r) * edge + cx * CELL + c] =
                        base + POSITION_BIT * bit as f64;
                }
            }
        }
        RasterImage::new(edge, edge, 1, pixels).expect("grid render fills its buffer")
    }

    /// Compose the report from per-glyph templates in reading order. The
    /// wording is a pure function of the grid, so a glyph-to-words lookup
    /// reconstructs the report exactly.
    pub fn report(&self) -> String {
        let mut clauses = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let glyph = GLYPH_WORDS[cell.glyph];
            let finding = FINDING_WORDS[cell.glyph];
            let clause = if cell.abnormal {
                let severity = SEVERITY_WORDS[cell.glyph % SEVERITY_WORDS.len()];
                format!("{glyph} shows {severity} {finding}")
            } else if cell.glyph % 2 == 1 {
                format!("{glyph} without {finding}")
            } else {
                format!("{glyph} clear")
            };
            clauses.push(clause);
        }
        clauses.join(" ")
    }

    /// Ground-truth labels: finding words of abnormal cells.
    pub fn labels(&self) -> BTreeSet<String> {
        self.cells
            .iter()
            .filter(|c| c.abnormal)
            .map(|c| FINDING_WORDS[c.glyph].to_string())
            .collect()
    }
}

/// Keyword rules matching the corpus templates: each finding word triggers
/// its own category unless negated within three tokens.
pub fn corpus_rule_table() -> RuleTable {
    RuleTable {
        rules: FINDING_WORDS
            .iter()
            .map(|w| LabelRule {
                trigger: vec![w.to_string()],
                category: w.to_string(),
            })
            .collect(),
        negations: ["no", "without"].iter().map(|s| s.to_string()).collect(),
        window: 3,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!(
                "unknown split `{other}` (expected train|val|test)"
            ))),
        }
    }
}

/// One dataset record. Exactly one of `image_path` / `feature_paths` is set;
/// paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_paths: Option<Vec<String>>,
    pub report: String,
    pub labels: Vec<String>,
    pub split: Split,
}

/// A loaded manifest plus the directory its paths resolve against.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Argument(format!("record `{id}` is not in the manifest")))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Load and validate a manifest: unique ids, a source per record, and every
/// referenced path present on disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id.clone()) {
            return Err(Error::Format(format!("duplicate record id `{}`", r.id)));
        }
        let paths: Vec<&String> = match (&r.image_path, &r.feature_paths) {
            (Some(p), None) => vec![p],
            (None, Some(ps)) if !ps.is_empty() => ps.iter().collect(),
            _ => {
                return Err(Error::Format(format!(
                    "record `{}` must carry an image path or feature paths",
                    r.id
                )))
            }
        };
        for p in paths {
            if !root.join(p).exists() {
                return Err(Error::Format(format!(
                    "record `{}` references missing file {p}", r.id
                )));
            }
        }
    }
    Ok(Manifest { records, root })
}

/// Corpus generation parameters.
#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub grid: usize,
    pub abnormal_rate: f64,
    /// Emit patch-vector feature files instead of PGM images.
    pub emit_features: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            seed: 0,
            n_train: 256,
            n_val: 32,
            n_test: 64,
            grid: 4,
            abnormal_rate: 0.3,
            emit_features: false,
        }
    }
}

/// Generate a corpus under `dir`: images (or feature files) plus
/// `manifest.json`. Fully deterministic in the seed.
pub fn generate_corpus(dir: &Path, opts: &GenerateOptions) -> Result<Manifest> {
    if opts.n_train == 0 || opts.n_val == 0 || opts.n_test == 0 {
        return Err(Error::Argument(
            "every split needs at least one record".into(),
        ));
    }
    if !(0.0..=1.0).contains(&opts.abnormal_rate) {
        return Err(Error::Argument(format!(
            "abnormal rate {} must lie in [0, 1]",
            opts.abnormal_rate
        )));
    }
    if opts.grid == 0 {
        return Err(Error::Argument("grid size must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let payload_dir = dir.join(if opts.emit_features { "features" } else { "images" });
    fs::create_dir_all(&payload_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    for (split, count) in [
        (Split::Train, opts.n_train),
        (Split::Val, opts.n_val),
        (Split::Test, opts.n_test),
    ] {
        for i in 0..count {
            let grid = GridWorld::sample(opts.grid, opts.abnormal_rate, &mut rng);
            let id = format!("{}-{i:04}", split.name());
            let image = grid.render();
            let (image_path, feature_paths) = if opts.emit_features {
                let rel = format!("features/{id}.bin");
                let patches = visual::patchify(&image, CELL)?;
                visual::save_features(&dir.join(&rel), &patches)?;
                (None, Some(vec![rel]))
            } else {
                let rel = format!("images/{id}.pgm");
                visual::write_pgm(&dir.join(&rel), &image)?;
                (Some(rel), None)
            };
            records.push(ManifestRecord {
                id,
                image_path,
                feature_paths,
                report: grid.report(),
                labels: grid.labels().into_iter().collect(),
                split,
            });
        }
    }
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json.as_bytes())?;
    Ok(Manifest {
        records,
        root: dir.to_path_buf(),
    })
}

/// Token-id vocabulary with reserved pad/bos/eos/unk slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_items(items: Vec<String>) -> Result<Vocab> {
        if items.len() < 4
            || items[tokens::PAD] != "<pad>"
            || items[tokens::BOS] != "<bos>"
            || items[tokens::EOS] != "<eos>"
            || items[tokens::UNK] != "<unk>"
        {
            return Err(Error::Format(
                "vocabulary must begin with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let index = items
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { items, index })
    }

    pub fn size(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(tokens::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.items[id]
    }

    /// `BOS tokens EOS`, unknown words mapped to UNK.
    pub fn encode_report(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![tokens::BOS];
        ids.extend(tokenize(text).iter().map(|t| self.id(t)));
        ids.push(tokens::EOS);
        ids
    }

    /// Content token ids to words; pad/bos/eos markers are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| ![tokens::PAD, tokens::BOS, tokens::EOS].contains(&i))
            .map(|&i| self.items[i].clone())
            .collect()
    }
}

/// Build the vocabulary from the train split only: frequency descending,
/// then lexicographic; tokens below `min_count` are dropped.
pub fn build_vocab(manifest: &Manifest, min_count: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for rec in manifest.split(Split::Train) {
        any = true;
        for tok in tokenize(&rec.report) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Argument("manifest has an empty train split".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut items = vec![
        "<pad>".to_string(),
        "<bos>".to_string(),
        "<eos>".to_string(),
        "<unk>".to_string(),
    ];
    items.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_items(items)
}

/// Per-split counts mirroring a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub images: usize,
    pub reports: usize,
    pub avg_len: f64,
}

pub fn corpus_stats(manifest: &Manifest) -> Vec<SplitStats> {
    [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .map(|split| {
            let mut images = 0;
            let mut reports = 0;
            let mut tokens_total = 0;
            for rec in manifest.split(split) {
                reports += 1;
                images += match &rec.feature_paths {
                    Some(ps) => ps.len(),
                    None => 1,
                };
                tokens_total += tokenize(&rec.report).len();
            }
            SplitStats {
                split,
                images,
                reports,
                avg_len: if reports == 0 {
                    0.0
                } else {
                    tokens_total as f64 / reports as f64
                },
            }
        })
        .collect()
}

/// A record made model-ready: source features plus encoded report.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub sample: Sample,
    pub reference: Vec<String>,
    pub labels: BTreeSet<String>,
}

/// Load a split's records: patchify images (patch size `patch`) or load and
/// concatenate feature files, and encode reports against the vocabulary.
pub fn prepare_split(
    manifest: &Manifest,
    vocab: &Vocab,
    split: Split,
    patch: usize,
    feature_dim: Option<usize>,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::new();
    for rec in manifest.split(split) {
        let source = match (&rec.image_path, &rec.feature_paths) {
            (Some(p), _) => {
                let img = visual::read_pgm(&manifest.resolve(p))?;
                SourceInput::Patches(visual::patchify(&img, patch)?)
            }
            (None, Some(ps)) => {
                let views: Vec<_> = ps
                    .iter()
                    .map(|p| visual::load_features(&manifest.resolve(p), feature_dim))
                    .collect::<Result<_>>()?;
                SourceInput::Features(visual::concat_views(&views)?)
            }
            (None, None) => {
                return Err(Error::Format(format!("record `{}` has no source", rec.id)))
            }
        };
        out.push(PreparedSample {
            id: rec.id.clone(),
            sample: Sample {
                source,
                tokens: vocab.encode_report(&rec.report),
            },
            reference: tokenize(&rec.report),
            labels: rec.labels.iter().cloned().collect(),
        });
    }
    Ok(out)
}
