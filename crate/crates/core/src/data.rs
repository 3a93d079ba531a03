//! Synthetic unpaired image-text dataset: class-coded blob images, token
//! template texts, multi-hot labels, prompt sets, and the on-disk dataset
//! directory format (`manifest.json` + stacked `images.bfmt`).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Token-id layout inside the fixed vocabulary: one filler token, a band of
/// class tokens, a band of template-lead tokens, and general filler tokens.
pub const VOCAB: usize = 64;
const CLASS_TOKEN_BASE: u32 = 1;
pub const MAX_CLASSES: usize = 16;
const TEMPLATE_TOKEN_BASE: u32 = 17;
pub const PROMPTS_PER_CLASS: usize = 10;
const FILLER_TOKEN_BASE: u32 = 27;
const FILLER_TOKENS: u32 = 37;

/// K-dimensional multi-hot class membership vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().all(|&b| b == 0) {
            return Err(CoreError::Domain("label vector has no set bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(CoreError::Domain("label bits must be 0 or 1".into()));
        }
        Ok(LabelVector { bits })
    }

    pub fn one_hot(class: usize, k: usize) -> Result<Self> {
        if class >= k {
            return Err(CoreError::Domain(format!(
                "class {class} out of range for {k} classes"
            )));
        }
        let mut bits = vec![0u8; k];
        bits[class] = 1;
        LabelVector::new(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// The single set class for one-hot vectors.
    pub fn class_index(&self) -> Option<usize> {
        let set: Vec<usize> = self
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect();
        if set.len() == 1 {
            Some(set[0])
        } else {
            None
        }
    }
}

/// One image-text pair with separate image- and text-side labels. In clean
/// data the two labels agree; poisoning flips only the image side.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub tokens: Vec<u32>,
    pub image_label: LabelVector,
    pub text_label: LabelVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Finetune,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub seed: u64,
    pub image_side: usize,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.class_names.len()
    }
}

/// Generation parameters for the synthetic task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub finetune_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 2,
            train_per_class: 1000,
            finetune_per_class: 128,
            test_per_class: 200,
            image_side: 64,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::Config("need at least 2 classes".into()));
        }
        if self.classes > MAX_CLASSES {
            return Err(CoreError::Config(format!(
                "{} classes exceed token-template capacity {MAX_CLASSES}",
                self.classes
            )));
        }
        for (name, count) in [
            ("train", self.train_per_class),
            ("finetune", self.finetune_per_class),
            ("test", self.test_per_class),
        ] {
            if count < 8 {
                return Err(CoreError::Config(format!(
                    "{name} split needs at least 8 samples per class, got {count}"
                )));
            }
        }
        if self.image_side < 16 {
            return Err(CoreError::Config("image side must be at least 16".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class-{c}")).collect()
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Finetune => self.finetune_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// Intensity profile of the class-coded blob images.
const BASE_INTENSITY: f64 = 55.0;
const BLOB_AMPLITUDE: f64 = 110.0;
pub const BLOB_RADIUS: f64 = 9.0;
const NOISE_SIGMA: f64 = 12.0;

/// Center of the class-`c` blob on a circle around the image center.
pub fn blob_center(class: usize, k: usize, side: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
    let r = side as f64 / 4.0;
    let c = (side as f64 - 1.0) / 2.0;
    (c + r * angle.sin(), c + r * angle.cos())
}

fn class_image(class: usize, k: usize, side: usize, rng: &mut impl Rng) -> Tensor {
    let (cr, cc) = blob_center(class, k, side);
    let normal = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut data = Vec::with_capacity(side * side);
    let denom = 2.0 * BLOB_RADIUS * BLOB_RADIUS;
    for r in 0..side {
        for c in 0..side {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            let v = BASE_INTENSITY + BLOB_AMPLITUDE * (-d2 / denom).exp() + normal.sample(rng);
            data.push(v.clamp(0.0, 255.0) as f32);
        }
    }
    Tensor::new(vec![side, side], data).unwrap()
}

/// Token sequence for template `t` instantiated with class `c`. All tokens
/// except the class token depend only on the template index.
fn template_tokens(t: usize, class: usize) -> Vec<u32> {
    let lead = TEMPLATE_TOKEN_BASE + t as u32;
    let f1 = FILLER_TOKEN_BASE + (7 * t as u32) % FILLER_TOKENS;
    let f2 = FILLER_TOKEN_BASE + (11 * t as u32 + 3) % FILLER_TOKENS;
    vec![lead, 0, CLASS_TOKEN_BASE + class as u32, f1, f2]
}

/// Ten templated prompts per class, sharing template tokens across classes
/// and differing only in the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_names: Vec<String>,
    pub prompts: Vec<Vec<Vec<u32>>>,
}

impl PromptSet {
    pub fn k(&self) -> usize {
        self.class_names.len()
    }
}

pub fn make_prompts(class_names: &[String], _seed: u64) -> Result<PromptSet> {
    let k = class_names.len();
    if k == 0 || k > MAX_CLASSES {
        return Err(CoreError::Config(format!(
            "prompt set needs 1..={MAX_CLASSES} classes, got {k}"
        )));
    }
    let mut uniq = class_names.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.len() != k {
        return Err(CoreError::Config("class names must be distinct".into()));
    }
    let prompts = (0..k)
        .map(|c| {
            (0..PROMPTS_PER_CLASS)
                .map(|t| template_tokens(t, c))
                .collect()
        })
        .collect();
    Ok(PromptSet {
        class_names: class_names.to_vec(),
        prompts,
    })
}

/// Generate one split of the synthetic dataset. Both modalities of a fresh
/// sample carry the same one-hot label; the split is class-balanced by
/// construction and a pure function of `(config, split)`.
pub fn gen_synthetic_dataset(cfg: &DataConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let per_class = cfg.per_class(split);
    let k = cfg.classes;
    let split_seed = rng::derive_seed(cfg.seed, &format!("data:{}", split.tag()));
    let mut samples = Vec::with_capacity(per_class * k);
    for idx in 0..per_class * k {
        let class = idx % k;
        // Per-sample stream so generation order never affects content.
        let mut r = rng::step_rng(split_seed, "sample", idx as u64);
        let image = class_image(class, k, cfg.image_side, &mut r);
        let template = r.gen_range(0..PROMPTS_PER_CLASS);
        let mut tokens = template_tokens(template, class);
        tokens.push(FILLER_TOKEN_BASE + r.gen_range(0..FILLER_TOKENS));
        let label = LabelVector::one_hot(class, k)?;
        samples.push(Sample {
            image,
            tokens,
            image_label: label.clone(),
            text_label: label,
        });
    }
    Ok(Dataset {
        samples,
        class_names: cfg.class_names(),
        split,
        seed: cfg.seed,
        image_side: cfg.image_side,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    tokens: Vec<u32>,
    image_label: Vec<u8>,
    text_label: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    class_names: Vec<String>,
    split: Split,
    seed: u64,
    image_side: usize,
    label_width: usize,
    sample_count: usize,
    samples: Vec<ManifestSample>,
}

/// Write a dataset directory: `manifest.json` plus `images.bfmt` holding a
/// single stacked N x H x W tensor.
pub fn write_dataset<P: AsRef<Path>>(dir: P, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: 1,
        class_names: ds.class_names.clone(),
        split: ds.split,
        seed: ds.seed,
        image_side: ds.image_side,
        label_width: ds.k(),
        sample_count: ds.samples.len(),
        samples: ds
            .samples
            .iter()
            .map(|s| ManifestSample {
                tokens: s.tokens.clone(),
                image_label: s.image_label.bits().to_vec(),
                text_label: s.text_label.bits().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let side = ds.image_side;
    let mut stacked = Vec::with_capacity(ds.samples.len() * side * side);
    for s in &ds.samples {
        if s.image.shape() != [side, side] {
            return Err(CoreError::Shape(format!(
                "sample image shape {:?} does not match dataset side {side}",
                s.image.shape()
            )));
        }
        stacked.extend_from_slice(s.image.data());
    }
    Tensor::new(vec![ds.samples.len(), side, side], stacked)?
        .save_bfmt(dir.join("images.bfmt"))?;
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`], cross-checking the
/// manifest against the image payload.
pub fn read_dataset<P: AsRef<Path>>(dir: P) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(CoreError::Format(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let images = Tensor::load_bfmt(dir.join("images.bfmt"))?;
    let side = manifest.image_side;
    if images.shape() != [manifest.sample_count, side, side] {
        return Err(CoreError::Integrity(format!(
            "images.bfmt shape {:?} does not match manifest ({} samples of {side}x{side})",
            images.shape(),
            manifest.sample_count
        )));
    }
    if manifest.samples.len() != manifest.sample_count {
        return Err(CoreError::Integrity(format!(
            "manifest lists {} samples but declares {}",
            manifest.samples.len(),
            manifest.sample_count
        )));
    }
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for (i, ms) in manifest.samples.iter().enumerate() {
        if ms.image_label.len() != manifest.label_width
            || ms.text_label.len() != manifest.label_width
        {
            return Err(CoreError::Integrity(format!(
                "sample {i} label width does not match manifest"
            )));
        }
        let image = Tensor::new(
            vec![side, side],
            images.data()[i * side * side..(i + 1) * side * side].to_vec(),
        )?;
        samples.push(Sample {
            image,
            tokens: ms.tokens.clone(),
            image_label: LabelVector::new(ms.image_label.clone())?,
            text_label: LabelVector::new(ms.text_label.clone())?,
        });
    }
    Ok(Dataset {
        samples,
        class_names: manifest.class_names,
        split: manifest.split,
        seed: manifest.seed,
        image_side: side,
    })
}
