//! Dataset ingestion and the synthetic toy dataset.
//!
//! A manifest is a JSON file:
//!
//! ```json
//! {"items": [{"image_path": "images/00001.jpg", "image_id": "00001",
//!             "captions": ["many planes are parked", "..."], "split": "train"}]}
//! ```
//!
//! `split` is optional; relative image paths resolve against the manifest's
//! directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PetlError, Result};
use crate::retrieval::RetrievalSplit;

pub const MAX_CAPTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PetlError::input(format!("unknown split {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image_path: PathBuf,
    pub image_id: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Decoded pixels of generated datasets that live only in memory.
    #[serde(skip)]
    pub pixels: Option<Arc<RgbImage>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    /// Directory relative image paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_captions(&self) -> usize {
        self.items.iter().map(|i| i.captions.len()).sum()
    }

    pub fn resolve(&self, item: &ManifestItem) -> PathBuf {
        if item.image_path.is_absolute() {
            item.image_path.clone()
        } else {
            self.root.join(&item.image_path)
        }
    }

    /// Checks unique ids and caption counts.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (idx, item) in self.items.iter().enumerate() {
            if !seen.insert(item.image_id.as_str()) {
                return Err(PetlError::input(format!(
                    "item {idx}: duplicate image_id {:?}",
                    item.image_id
                )));
            }
            if item.captions.is_empty() || item.captions.len() > MAX_CAPTIONS {
                return Err(PetlError::input(format!(
                    "item {idx} ({}): {} captions, expected 1..={MAX_CAPTIONS}",
                    item.image_id,
                    item.captions.len()
                )));
            }
            if let Some(c) = item.captions.iter().position(|c| c.trim().is_empty()) {
                return Err(PetlError::input(format!(
                    "item {idx} ({}): caption {c} is empty",
                    item.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn load_image(&self, item: &ManifestItem) -> Result<RgbImage> {
        match &item.pixels {
            Some(p) => Ok(p.as_ref().clone()),
            None => load_image(&self.resolve(item)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Reads and validates a manifest. Missing image files are reported up front.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| PetlError::input(format!("{}: {e}", path.display())))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    for (idx, item) in manifest.items.iter().enumerate() {
        let p = manifest.resolve(item);
        if !p.is_file() {
            return Err(PetlError::input(format!(
                "item {idx} ({}): image file {} not found",
                item.image_id,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| PetlError::input(format!("cannot decode {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifests {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

impl SplitManifests {
    pub fn get(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded shuffle into train/val/test. Val and test get `floor(n·ratio)`
/// images, train takes the remainder. Preassigned splits are honored when
/// every item carries one.
pub fn split_dataset(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<SplitManifests> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PetlError::config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let subset = |idx: &[usize]| DatasetManifest {
        items: idx.iter().map(|&i| manifest.items[i].clone()).collect(),
        root: manifest.root.clone(),
    };
    let assigned = manifest.items.iter().filter(|i| i.split.is_some()).count();
    if assigned > 0 {
        if assigned != manifest.len() {
            return Err(PetlError::config(format!(
                "{assigned} of {} items carry a split; assign all or none",
                manifest.len()
            )));
        }
        let pick = |s: Split| -> Vec<usize> {
            (0..manifest.len())
                .filter(|&i| manifest.items[i].split == Some(s))
                .collect()
        };
        return Ok(SplitManifests {
            train: subset(&pick(Split::Train)),
            val: subset(&pick(Split::Val)),
            test: subset(&pick(Split::Test)),
        });
    }
    let n = manifest.len();
    let n_val = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(SplitManifests {
        train: subset(&parts[0]),
        val: subset(&parts[1]),
        test: subset(&parts[2]),
    })
}

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Constants published with the pretrained CLIP backbone.
    pub const CLIP: Normalization = Normalization {
        mean: [0.48145466, 0.4578275, 0.40821073],
        std: [0.26862954, 0.26130258, 0.27577711],
    };

    /// Pixels scaled to `[0, 1]` and left there.
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::CLIP
    }
}

/// Bilinear resize to `target × target` (skipped when already that size),
/// then `(x/255 − mean) / std` per channel.
pub fn preprocess_image(raw: &RgbImage, target: usize, norm: &Normalization) -> Result<Array3<f64>> {
    if target == 0 || raw.width() == 0 || raw.height() == 0 {
        return Err(PetlError::input("empty image or target size"));
    }
    let t = target as u32;
    let resized;
    let img = if raw.width() == t && raw.height() == t {
        raw
    } else {
        resized = image::imageops::resize(raw, t, t, FilterType::Triangle);
        &resized
    };
    Ok(Array3::from_shape_fn((target, target, 3), |(y, x, c)| {
        let v = img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
        (v - norm.mean[c]) / norm.std[c]
    }))
}

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Whitespace vocabulary with explicit special ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: BTreeMap<String, usize>,
    pub bos: usize,
    pub eos: usize,
    pub unk: usize,
}

impl Vocab {
    pub fn from_map(tokens: BTreeMap<String, usize>, bos: usize, eos: usize, unk: usize) -> Self {
        Vocab { tokens, bos, eos, unk }
    }

    /// `<unk>`, `<bos>`, `<eos>` take ids 0..3; words follow in order,
    /// duplicates skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = BTreeMap::new();
        for (i, s) in [UNK, BOS, EOS].iter().enumerate() {
            tokens.insert(s.to_string(), i);
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            let next = tokens.len();
            tokens.entry(w).or_insert(next);
        }
        Vocab {
            tokens,
            bos: 1,
            eos: 2,
            unk: 0,
        }
    }

    /// The `max_size − 3` most frequent words (ties alphabetical).
    pub fn from_corpus<'a>(captions: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for w in c.to_lowercase().split_whitespace() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<_> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_size.saturating_sub(3));
        Self::from_words(words.into_iter().map(|(w, _)| w))
    }

    /// One past the largest id.
    pub fn size(&self) -> usize {
        self.tokens.values().max().map_or(0, |m| m + 1)
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens.get(word).copied().unwrap_or(self.unk)
    }

    /// Words for ids, skipping BOS and EOS.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        let reverse: HashMap<usize, &str> = self.tokens.iter().map(|(w, &i)| (i, w.as_str())).collect();
        ids.iter()
            .filter(|&&i| i != self.bos && i != self.eos)
            .map(|i| reverse.get(i).copied().unwrap_or(UNK).to_string())
            .collect()
    }
}

/// Lowercases, splits on whitespace, maps through the vocabulary and wraps in
/// BOS/EOS. Overlong sequences are truncated with EOS kept last.
pub fn tokenize(text: &str, vocab: &Vocab, context_length: usize) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Err(PetlError::input("cannot tokenize empty text"));
    }
    if context_length < 2 {
        return Err(PetlError::config("context length must fit BOS and EOS"));
    }
    let mut ids = vec![vocab.bos];
    ids.extend(text.to_lowercase().split_whitespace().map(|w| vocab.id(w)));
    ids.truncate(context_length - 1);
    ids.push(vocab.eos);
    Ok(ids)
}

/// Preprocesses images and tokenizes captions of a manifest.
pub fn to_retrieval_split(
    manifest: &DatasetManifest,
    vocab: &Vocab,
    context_length: usize,
    image_size: usize,
    norm: &Normalization,
) -> Result<RetrievalSplit> {
    let images = manifest
        .items
        .par_iter()
        .map(|item| preprocess_image(&manifest.load_image(item)?, image_size, norm))
        .collect::<Result<Vec<_>>>()?;
    let mut captions = Vec::new();
    let mut caption_to_image = Vec::new();
    for (i, item) in manifest.items.iter().enumerate() {
        for c in &item.captions {
            captions.push(tokenize(c, vocab, context_length)?);
            caption_to_image.push(i);
        }
    }
    Ok(RetrievalSplit {
        images,
        captions,
        caption_to_image,
        image_ids: manifest.items.iter().map(|i| i.image_id.clone()).collect(),
    })
}

const FILLER_WORDS: [&str; 19] = [
    "a", "the", "there", "is", "are", "many", "some", "of", "in", "with", "near", "and", "next", "to", "area", "scene",
    "this", "several", "by",
];

const CONTENT_WORDS: [&str; 40] = [
    "airport",
    "beach",
    "bridge",
    "church",
    "desert",
    "farmland",
    "forest",
    "harbor",
    "industrial",
    "meadow",
    "mountain",
    "park",
    "parking",
    "playground",
    "pond",
    "port",
    "railway",
    "river",
    "school",
    "stadium",
    "storage",
    "tanks",
    "viaduct",
    "baseball",
    "square",
    "resort",
    "commercial",
    "residential",
    "dense",
    "sparse",
    "center",
    "bareland",
    "planes",
    "boats",
    "cars",
    "trees",
    "buildings",
    "roads",
    "ships",
    "houses",
];

/// Sentence frames; `{a}`, `{b}`, `{c}` take the class words.
const FRAMES: [&str; 8] = [
    "there are many {a} near the {b}",
    "a {c} {a} is next to the {b}",
    "some {b} are in the {c} area",
    "this is a {a} scene with {c} {b}",
    "several {c} and {a} are near a {b}",
    "the {a} is in a {c} area with {b}",
    "many {b} and some {c} are next to the {a}",
    "a {b} with {a} in this scene",
];

pub const WORDS_PER_CLASS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDatasetConfig {
    pub n_classes: usize,
    pub items_per_class: usize,
    pub captions_per_image: usize,
    /// Size of each class's caption template bank.
    pub templates_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Number of class-specific content words in the word pool.
    pub vocab_size: usize,
    /// Pixel noise, in units of the `[0, 1]` intensity range.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            n_classes: 8,
            items_per_class: 25,
            captions_per_image: 5,
            templates_per_class: 5,
            image_size: 16,
            channels: 3,
            vocab_size: 24,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("items_per_class", self.items_per_class),
            ("captions_per_image", self.captions_per_image),
            ("templates_per_class", self.templates_per_class),
            ("image_size", self.image_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(PetlError::config(format!("toy dataset {name} must be >= 1")));
        }
        if self.channels != 3 {
            return Err(PetlError::config("toy images are RGB (channels = 3)"));
        }
        if self.captions_per_image > MAX_CAPTIONS {
            return Err(PetlError::config(format!("at most {MAX_CAPTIONS} captions per image")));
        }
        if self.templates_per_class > FRAMES.len() {
            return Err(PetlError::config(format!(
                "at most {} templates per class",
                FRAMES.len()
            )));
        }
        if self.vocab_size < WORDS_PER_CLASS * self.n_classes {
            return Err(PetlError::config(format!(
                "vocab_size {} cannot give {} classes {WORDS_PER_CLASS} words each",
                self.vocab_size, self.n_classes
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(PetlError::config("noise_std must be >= 0"));
        }
        Ok(())
    }

    /// Words the generated captions draw from.
    pub fn word_pool(&self) -> Vec<String> {
        (0..self.vocab_size)
            .map(|i| match CONTENT_WORDS.get(i) {
                Some(w) => w.to_string(),
                None => format!("term{i}"),
            })
            .collect()
    }

    /// Fillers plus the content pool.
    pub fn vocab(&self) -> Vocab {
        Vocab::from_words(FILLER_WORDS.iter().map(|s| s.to_string()).chain(self.word_pool()))
    }
}

/// Generated dataset with its ground-truth class structure.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    pub prototypes: Vec<RgbImage>,
    /// Class of every item.
    pub classes: Vec<usize>,
    pub vocab: Vocab,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Each class gets a random prototype image and a bank of caption templates
/// built from words no other class uses; items are the prototype plus
/// Gaussian pixel noise with captions drawn from the bank.
pub fn synthesize_toy_dataset(cfg: &ToyDatasetConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size as u32;
    let mut pool = cfg.word_pool();
    pool.shuffle(&mut rng);

    let mut prototypes = Vec::with_capacity(cfg.n_classes);
    let mut banks = Vec::with_capacity(cfg.n_classes);
    for c in 0..cfg.n_classes {
        let raw: Vec<[f64; 3]> = (0..size * size)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        prototypes.push(raw);
        let words = &pool[c * WORDS_PER_CLASS..(c + 1) * WORDS_PER_CLASS];
        let mut frames: Vec<&str> = FRAMES.to_vec();
        frames.shuffle(&mut rng);
        let bank: Vec<String> = frames[..cfg.templates_per_class]
            .iter()
            .map(|f| {
                f.replace("{a}", &words[0])
                    .replace("{b}", &words[1])
                    .replace("{c}", &words[2])
            })
            .collect();
        banks.push(bank);
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| PetlError::config(e.to_string()))?;
    let mut items = Vec::new();
    let mut classes = Vec::new();
    for (c, proto) in prototypes.iter().enumerate() {
        for k in 0..cfg.items_per_class {
            let mut img = RgbImage::new(size, size);
            for (idx, px) in img.pixels_mut().enumerate() {
                let p = proto[idx];
                let mut v = [0u8; 3];
                for ch in 0..3 {
                    let n = if cfg.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    v[ch] = to_u8(p[ch] + n);
                }
                *px = Rgb(v);
            }
            let bank = &banks[c];
            let captions: Vec<String> = if cfg.captions_per_image <= bank.len() {
                let mut picked: Vec<&String> = bank.iter().collect();
                picked.shuffle(&mut rng);
                picked[..cfg.captions_per_image].iter().map(|s| s.to_string()).collect()
            } else {
                (0..cfg.captions_per_image)
                    .map(|_| bank.choose(&mut rng).expect("nonempty bank").clone())
                    .collect()
            };
            let id = format!("c{c:02}_i{k:03}");
            items.push(ManifestItem {
                image_path: PathBuf::from(format!("images/{id}.png")),
                image_id: id,
                captions,
                split: None,
                pixels: Some(Arc::new(img)),
            });
            classes.push(c);
        }
    }
    let prototypes = prototypes
        .into_iter()
        .map(|proto| {
            let mut img = RgbImage::new(size, size);
            for (idx, px) in img.pixels_mut().enumerate() {
                let p = proto[idx];
                *px = Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
            }
            img
        })
        .collect();
    Ok(ToyDataset {
        manifest: DatasetManifest {
            items,
            root: PathBuf::new(),
        },
        prototypes,
        classes,
        vocab: cfg.vocab(),
    })
}

/// Writes `manifest.json`, `vocab.json` and one PNG per item into `dir`.
pub fn export_toy_dataset(dataset: &ToyDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    for item in &dataset.manifest.items {
        let pixels = item
            .pixels
            .as_ref()
            .ok_or_else(|| PetlError::input(format!("item {} has no pixels", item.image_id)))?;
        pixels
            .save(dir.join(&item.image_path))
            .map_err(|e| PetlError::Io(std::io::Error::other(e.to_string())))?;
    }
    let path = dir.join("manifest.json");
    dataset.manifest.save(&path)?;
    fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&dataset.vocab)?)?;
    Ok(path)
}
