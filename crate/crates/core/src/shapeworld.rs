//! Synthetic image/caption dataset plus dataset, vocabulary and split files.
//!
//! Each "image" is an attribute tuple (shape, color, size, background)
//! rendered as a feature vector: a fixed seeded random projection of the
//! attribute one-hot encoding plus Gaussian noise. Labeled records carry
//! template captions ranging from discriminative ("a small red circle on a
//! grass") down to generic ("a circle"), which is exactly the ambiguity the
//! self-retrieval reward is meant to resolve. Everything is a pure function
//! of (config, seed).

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const DEFAULT_SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "hexagon", "diamond"];
pub const DEFAULT_COLORS: [&str; 8] =
    ["red", "blue", "green", "yellow", "purple", "orange", "pink", "brown"];
pub const DEFAULT_SIZES: [&str; 3] = ["small", "medium", "large"];
pub const DEFAULT_BACKGROUNDS: [&str; 6] = ["grass", "sand", "water", "sky", "snow", "stone"];

#[derive(Debug, Error)]
pub enum ShapeworldError {
    #[error("empty attribute inventory: {0}")]
    EmptyInventory(&'static str),
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("record {id}: {message}")]
    BadField { id: String, message: String },
    #[error("empty caption corpus")]
    EmptyCorpus,
    #[error("vocabulary file invalid: {0}")]
    BadVocab(String),
    #[error("split file invalid: {0}")]
    BadSplit(String),
}

/// Categorical description of one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeTuple {
    pub shape: String,
    pub color: String,
    pub size: String,
    pub background: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub attrs: AttributeTuple,
    /// Reference captions as lowercase token lists; empty means unlabeled.
    pub captions: Vec<Vec<String>>,
}

impl ImageRecord {
    pub fn is_labeled(&self) -> bool {
        !self.captions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

/// Attribute inventories; the defaults give 6*8*3*6 = 864 distinct tuples.
#[derive(Debug, Clone)]
pub struct Inventories {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub backgrounds: Vec<String>,
}

impl Default for Inventories {
    fn default() -> Self {
        Inventories {
            shapes: DEFAULT_SHAPES.iter().map(|s| s.to_string()).collect(),
            colors: DEFAULT_COLORS.iter().map(|s| s.to_string()).collect(),
            sizes: DEFAULT_SIZES.iter().map(|s| s.to_string()).collect(),
            backgrounds: DEFAULT_BACKGROUNDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Inventories {
    pub fn one_hot_width(&self) -> usize {
        self.shapes.len() + self.colors.len() + self.sizes.len() + self.backgrounds.len()
    }

    pub fn combinations(&self) -> usize {
        self.shapes.len() * self.colors.len() * self.sizes.len() * self.backgrounds.len()
    }

    fn validate(&self) -> Result<(), ShapeworldError> {
        if self.shapes.is_empty() {
            return Err(ShapeworldError::EmptyInventory("shapes"));
        }
        if self.colors.is_empty() {
            return Err(ShapeworldError::EmptyInventory("colors"));
        }
        if self.sizes.is_empty() {
            return Err(ShapeworldError::EmptyInventory("sizes"));
        }
        if self.backgrounds.is_empty() {
            return Err(ShapeworldError::EmptyInventory("backgrounds"));
        }
        Ok(())
    }

    fn one_hot(&self, attrs: &(usize, usize, usize, usize)) -> Vec<f64> {
        let mut v = vec![0.0; self.one_hot_width()];
        let (s, c, z, b) = *attrs;
        v[s] = 1.0;
        v[self.shapes.len() + c] = 1.0;
        v[self.shapes.len() + self.colors.len() + z] = 1.0;
        v[self.shapes.len() + self.colors.len() + self.sizes.len() + b] = 1.0;
        v
    }
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub d_img: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub inventories: Inventories,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_labeled: 2000,
            n_unlabeled: 2000,
            n_val: 500,
            n_test: 500,
            d_img: 64,
            noise_level: 0.1,
            seed: 0,
            inventories: Inventories::default(),
        }
    }
}

fn caption_templates(inv: &Inventories, a: &(usize, usize, usize, usize)) -> Vec<Vec<String>> {
    let shape = &inv.shapes[a.0];
    let color = &inv.colors[a.1];
    let size = &inv.sizes[a.2];
    let background = &inv.backgrounds[a.3];
    let split = |s: String| s.split_whitespace().map(|t| t.to_string()).collect::<Vec<_>>();
    vec![
        split(format!("a {size} {color} {shape} on a {background}")),
        split(format!("a {color} {shape} on a {background}")),
        split(format!("a {shape}")),
    ]
}

/// Standard Gaussian via Box-Muller; depends only on the rng stream, so it is
/// stable across library versions.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate the full record list and its split. Validation and test records
/// get distinct attribute tuples within their split so caption-to-image
/// retrieval has a well-defined optimum; training records are sampled iid.
pub fn generate(cfg: &GenerateConfig) -> Result<(Vec<ImageRecord>, DatasetSplit), ShapeworldError> {
    cfg.inventories.validate()?;
    if cfg.n_labeled == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(ShapeworldError::BadConfig(
            "n_labeled, n_val and n_test must all be positive".into(),
        ));
    }
    let width = cfg.inventories.one_hot_width();
    if cfg.d_img < width {
        return Err(ShapeworldError::BadConfig(format!(
            "d_img {} is smaller than the attribute one-hot width {width}",
            cfg.d_img
        )));
    }
    if cfg.noise_level < 0.0 || !cfg.noise_level.is_finite() {
        return Err(ShapeworldError::BadConfig("noise_level must be finite and >= 0".into()));
    }
    let combos = cfg.inventories.combinations();
    if cfg.n_val > combos || cfg.n_test > combos {
        return Err(ShapeworldError::BadConfig(format!(
            "n_val/n_test may not exceed the {combos} distinct attribute tuples"
        )));
    }

    // Projection matrix depends only on (seed, d_img, inventories).
    let mut proj_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    proj_rng.set_stream(1);
    let projection: Vec<f64> = (0..cfg.d_img * width).map(|_| gaussian(&mut proj_rng)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let inv = &cfg.inventories;
    let random_attrs = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(0..inv.shapes.len()),
            rng.gen_range(0..inv.colors.len()),
            rng.gen_range(0..inv.sizes.len()),
            rng.gen_range(0..inv.backgrounds.len()),
        )
    };

    let features = |attrs: &(usize, usize, usize, usize), rng: &mut ChaCha8Rng| {
        let one_hot = inv.one_hot(attrs);
        let mut f = Vec::with_capacity(cfg.d_img);
        for row in projection.chunks_exact(width) {
            let base: f64 = row.iter().zip(&one_hot).map(|(a, b)| a * b).sum();
            f.push(base);
        }
        for v in f.iter_mut() {
            *v += cfg.noise_level * gaussian(rng);
        }
        f
    };

    let total = cfg.n_labeled + cfg.n_unlabeled + cfg.n_val + cfg.n_test;
    let mut records = Vec::with_capacity(total);
    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        config_fingerprint: None,
    };

    let mut next_id = 0usize;
    let mut push = |records: &mut Vec<ImageRecord>,
                    attrs: (usize, usize, usize, usize),
                    labeled: bool,
                    rng: &mut ChaCha8Rng| {
        let id = format!("img_{next_id:05}");
        next_id += 1;
        let captions = if labeled { caption_templates(inv, &attrs) } else { Vec::new() };
        records.push(ImageRecord {
            id: id.clone(),
            features: features(&attrs, rng),
            attrs: AttributeTuple {
                shape: inv.shapes[attrs.0].clone(),
                color: inv.colors[attrs.1].clone(),
                size: inv.sizes[attrs.2].clone(),
                background: inv.backgrounds[attrs.3].clone(),
            },
            captions,
        });
        id
    };

    for _ in 0..cfg.n_labeled {
        let a = random_attrs(&mut rng);
        let id = push(&mut records, a, true, &mut rng);
        split.labeled.push(id);
    }
    for _ in 0..cfg.n_unlabeled {
        let a = random_attrs(&mut rng);
        let id = push(&mut records, a, false, &mut rng);
        split.unlabeled.push(id);
    }
    for (count, bucket) in [(cfg.n_val, 0usize), (cfg.n_test, 1usize)] {
        let mut seen: HashSet<(usize, usize, usize, usize)> = HashSet::new();
        for _ in 0..count {
            let mut a = random_attrs(&mut rng);
            while !seen.insert(a) {
                a = random_attrs(&mut rng);
            }
            let id = push(&mut records, a, true, &mut rng);
            if bucket == 0 {
                split.validation.push(id);
            } else {
                split.test.push(id);
            }
        }
    }

    Ok((records, split))
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token table with fixed specials PAD=0, BOS=1, EOS=2, UNK=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Count tokens over the corpus, drop those below `min_count`, and assign
    /// ids from 4 upward by descending frequency (ties lexicographic).
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Result<Self, ShapeworldError> {
        if corpus.is_empty() {
            return Err(ShapeworldError::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in corpus {
            for token in caption {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut token_to_id = BTreeMap::new();
        let mut id_to_token: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        for (i, (token, _)) in kept.iter().enumerate() {
            token_to_id.insert(token.to_string(), (i + 4) as u32);
            id_to_token.push(token.to_string());
        }
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    /// Total id count including the four specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Encode to ids, truncating to `t_max` tokens first.
    pub fn encode(&self, tokens: &[String], t_max: usize) -> Vec<u32> {
        tokens.iter().take(t_max).map(|t| self.id_of(t)).collect()
    }

    /// Decode to words, skipping PAD/BOS/EOS.
    pub fn decode_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token_of(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn save(&self, path: &Path, fingerprint: Option<&str>) -> Result<(), ShapeworldError> {
        let file = VocabFile {
            specials: BTreeMap::from([
                ("PAD".to_string(), PAD),
                ("BOS".to_string(), BOS),
                ("EOS".to_string(), EOS),
                ("UNK".to_string(), UNK),
            ]),
            tokens: self.token_to_id.clone(),
            config_fingerprint: fingerprint.map(|s| s.to_string()),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| ShapeworldError::BadVocab(e.to_string()))?;
        std::fs::write(path, json + "\n")
            .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, ShapeworldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|e| ShapeworldError::BadVocab(e.to_string()))?;
        let expected = [("PAD", PAD), ("BOS", BOS), ("EOS", EOS), ("UNK", UNK)];
        for (name, id) in expected {
            if file.specials.get(name) != Some(&id) {
                return Err(ShapeworldError::BadVocab(format!("special {name} must map to {id}")));
            }
        }
        if file.specials.len() != 4 {
            return Err(ShapeworldError::BadVocab("exactly four specials expected".into()));
        }
        let mut ids: Vec<u32> = file.tokens.values().copied().collect();
        ids.sort_unstable();
        for (i, id) in ids.iter().enumerate() {
            if *id != (i + 4) as u32 {
                return Err(ShapeworldError::BadVocab(format!(
                    "token ids must be dense from 4, found {id} at position {i}"
                )));
            }
        }
        let mut id_to_token: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        id_to_token.resize(4 + file.tokens.len(), String::new());
        for (token, &id) in &file.tokens {
            id_to_token[id as usize] = token.clone();
        }
        Ok(Vocabulary { token_to_id: file.tokens, id_to_token })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, u32>,
    tokens: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_fingerprint: Option<String>,
}

// ---------------------------------------------------------------------------
// Dataset / split files
// ---------------------------------------------------------------------------

pub fn save_dataset(records: &[ImageRecord], path: &Path) -> Result<(), ShapeworldError> {
    let file = std::fs::File::create(path)
        .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| ShapeworldError::BadField { id: record.id.clone(), message: e.to_string() })?;
        writeln!(writer, "{line}")
            .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })?;
    }
    writer
        .flush()
        .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })
}

pub fn load_dataset(path: &Path) -> Result<Vec<ImageRecord>, ShapeworldError> {
    let file = std::fs::File::open(path)
        .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line
            .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| ShapeworldError::BadRecord { line: i + 1, message: e.to_string() })?;
        validate_record(&record, &mut dim)?;
        records.push(record);
    }
    Ok(records)
}

fn validate_record(record: &ImageRecord, dim: &mut Option<usize>) -> Result<(), ShapeworldError> {
    if record.id.is_empty() {
        return Err(ShapeworldError::BadField { id: "<empty>".into(), message: "empty id".into() });
    }
    if record.features.iter().any(|v| !v.is_finite()) {
        return Err(ShapeworldError::BadField {
            id: record.id.clone(),
            message: "non-finite feature value".into(),
        });
    }
    match dim {
        Some(d) if *d != record.features.len() => {
            return Err(ShapeworldError::BadField {
                id: record.id.clone(),
                message: format!("feature dim {} differs from {d}", record.features.len()),
            })
        }
        None => *dim = Some(record.features.len()),
        _ => {}
    }
    Ok(())
}

pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<(), ShapeworldError> {
    let json = serde_json::to_string_pretty(split)
        .map_err(|e| ShapeworldError::BadSplit(e.to_string()))?;
    std::fs::write(path, json + "\n")
        .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })
}

pub fn load_split(path: &Path) -> Result<DatasetSplit, ShapeworldError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ShapeworldError::Io { path: path.display().to_string(), source: e })?;
    let split: DatasetSplit =
        serde_json::from_str(&text).map_err(|e| ShapeworldError::BadSplit(e.to_string()))?;
    let mut seen = HashSet::new();
    for id in split
        .labeled
        .iter()
        .chain(&split.unlabeled)
        .chain(&split.validation)
        .chain(&split.test)
    {
        if !seen.insert(id) {
            return Err(ShapeworldError::BadSplit(format!("id {id} appears in two splits")));
        }
    }
    Ok(split)
}

/// Index records by id and check the split covers exactly the dataset.
pub fn partition<'a>(
    records: &'a [ImageRecord],
    split: &DatasetSplit,
) -> Result<Partition<'a>, ShapeworldError> {
    let by_id: HashMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<&'a ImageRecord>, ShapeworldError> {
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    ShapeworldError::BadSplit(format!("split id {id} not in dataset"))
                })
            })
            .collect()
    };
    let part = Partition {
        labeled: lookup(&split.labeled)?,
        unlabeled: lookup(&split.unlabeled)?,
        validation: lookup(&split.validation)?,
        test: lookup(&split.test)?,
    };
    let split_total =
        split.labeled.len() + split.unlabeled.len() + split.validation.len() + split.test.len();
    if split_total != records.len() {
        return Err(ShapeworldError::BadSplit(format!(
            "split covers {split_total} ids, dataset has {}",
            records.len()
        )));
    }
    for r in &part.labeled {
        if !r.is_labeled() {
            return Err(ShapeworldError::BadSplit(format!(
                "labeled split id {} has no captions",
                r.id
            )));
        }
    }
    Ok(part)
}

#[derive(Debug)]
pub struct Partition<'a> {
    pub labeled: Vec<&'a ImageRecord>,
    pub unlabeled: Vec<&'a ImageRecord>,
    pub validation: Vec<&'a ImageRecord>,
    pub test: Vec<&'a ImageRecord>,
}

/// Nearest-neighbor shape classification accuracy of held-out records against
/// a reference set; used to confirm features stay separable under noise.
pub fn shape_nn_accuracy(train: &[&ImageRecord], held_out: &[&ImageRecord]) -> f64 {
    if held_out.is_empty() || train.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for probe in held_out {
        let mut best = f64::INFINITY;
        let mut best_shape = "";
        for candidate in train {
            let d: f64 = probe
                .features
                .iter()
                .zip(&candidate.features)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best {
                best = d;
                best_shape = &candidate.attrs.shape;
            }
        }
        if best_shape == probe.attrs.shape {
            correct += 1;
        }
    }
    correct as f64 / held_out.len() as f64
}

/// Deterministic shuffle helper shared by the training loops.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
