//! Toy image and text encoders projecting into a shared unit-normalized
//! embedding space, with deterministic initialization, SGD updates, and
//! bit-exact checkpoint serialization.
//!
//! Two image backbones are provided: `mlp-small` (4x4 average pooling, two
//! affine layers) and `conv-small` (non-overlapping 8x8 patch convolution,
//! one affine head). The text encoder mean-pools a token embedding table
//! and projects the pooled vector; pooling makes it order-free.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

const MLP_POOL: usize = 4;
const MLP_HIDDEN: usize = 128;
const CONV_PATCH: usize = 8;
const CONV_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    ConvSmall,
    MlpSmall,
}

impl Backbone {
    pub fn tag(&self) -> &'static str {
        match self {
            Backbone::ConvSmall => "conv-small",
            Backbone::MlpSmall => "mlp-small",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-small" => Ok(Backbone::ConvSmall),
            "mlp-small" => Ok(Backbone::MlpSmall),
            other => Err(CoreError::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub image_side: usize,
    pub h: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::MlpSmall,
            image_side: 64,
            h: 64,
            vocab: crate::data::VOCAB,
            text_dim: 32,
            max_text_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.vocab == 0 || self.text_dim == 0 || self.max_text_len == 0 {
            return Err(CoreError::Config("model dimensions must be positive".into()));
        }
        match self.backbone {
            Backbone::MlpSmall if self.image_side % MLP_POOL != 0 => Err(CoreError::Config(
                format!("image side must be a multiple of {MLP_POOL} for mlp-small"),
            )),
            Backbone::ConvSmall if self.image_side % CONV_PATCH != 0 => Err(CoreError::Config(
                format!("image side must be a multiple of {CONV_PATCH} for conv-small"),
            )),
            _ => Ok(()),
        }
    }

    /// (first-layer input dim, first-layer output dim, head input dim).
    fn image_dims(&self) -> (usize, usize, usize) {
        match self.backbone {
            Backbone::MlpSmall => {
                let f = (self.image_side / MLP_POOL).pow(2);
                (f, MLP_HIDDEN, MLP_HIDDEN)
            }
            Backbone::ConvSmall => {
                let patches = (self.image_side / CONV_PATCH).pow(2);
                (
                    CONV_PATCH * CONV_PATCH,
                    CONV_CHANNELS,
                    patches * CONV_CHANNELS,
                )
            }
        }
    }

    /// Parameter names and shapes in serialization order.
    pub fn tensor_layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (in1, out1, head_in) = self.image_dims();
        vec![
            ("img_w1", vec![in1, out1]),
            ("img_b1", vec![out1]),
            ("img_w2", vec![head_in, self.h]),
            ("img_b2", vec![self.h]),
            ("text_embed", vec![self.vocab, self.text_dim]),
            ("txt_w", vec![self.text_dim, self.h]),
            ("txt_b", vec![self.h]),
        ]
    }
}

/// All learnable tensors of the paired encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub img_w1: Tensor,
    pub img_b1: Tensor,
    pub img_w2: Tensor,
    pub img_b2: Tensor,
    pub text_embed: Tensor,
    pub txt_w: Tensor,
    pub txt_b: Tensor,
}

impl EncoderParams {
    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.img_w1,
            &self.img_b1,
            &self.img_w2,
            &self.img_b2,
            &self.text_embed,
            &self.txt_w,
            &self.txt_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.img_w1,
            &mut self.img_b1,
            &mut self.img_w2,
            &mut self.img_b2,
            &mut self.text_embed,
            &mut self.txt_w,
            &mut self.txt_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// SHA-256 over the parameter payload, for frozen-model checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn uniform_tensor(shape: Vec<usize>, fan_in: usize, r: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| r.gen_range(-bound..bound) as f32)
            .collect(),
    )
    .unwrap()
}

/// Seeded uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut r = rng::stage_rng(seed, "init");
    let (in1, out1, head_in) = config.image_dims();
    Ok(EncoderParams {
        img_w1: uniform_tensor(vec![in1, out1], in1, &mut r),
        img_b1: uniform_tensor(vec![out1], in1, &mut r),
        img_w2: uniform_tensor(vec![head_in, config.h], head_in, &mut r),
        img_b2: uniform_tensor(vec![config.h], head_in, &mut r),
        text_embed: uniform_tensor(vec![config.vocab, config.text_dim], config.text_dim, &mut r),
        txt_w: uniform_tensor(vec![config.text_dim, config.h], config.text_dim, &mut r),
        txt_b: uniform_tensor(vec![config.h], config.text_dim, &mut r),
        config: config.clone(),
    })
}

/// Tape handles for every parameter, in serialization order.
pub struct ParamVars {
    pub all: Vec<Var>,
}

impl ParamVars {
    pub fn img_w1(&self) -> Var {
        self.all[0]
    }
    pub fn img_b1(&self) -> Var {
        self.all[1]
    }
    pub fn img_w2(&self) -> Var {
        self.all[2]
    }
    pub fn img_b2(&self) -> Var {
        self.all[3]
    }
    pub fn text_embed(&self) -> Var {
        self.all[4]
    }
    pub fn txt_w(&self) -> Var {
        self.all[5]
    }
    pub fn txt_b(&self) -> Var {
        self.all[6]
    }
}

/// Register all parameters on a tape. `trainable` controls whether
/// gradients flow to them.
pub fn register_params(tape: &mut Tape, params: &EncoderParams, trainable: bool) -> ParamVars {
    let all = params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                let mut owned = (*t).clone();
                owned.set_grad_enabled(true);
                tape.leaf(&owned)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    ParamVars { all }
}

fn check_image(config: &ModelConfig, image: &Tensor) -> Result<()> {
    if image.shape() != [config.image_side, config.image_side] {
        return Err(CoreError::Shape(format!(
            "image shape {:?} does not match configured {}x{}",
            image.shape(),
            config.image_side,
            config.image_side
        )));
    }
    if image.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
        return Err(CoreError::Domain(
            "image pixel values must lie in [0, 255]".into(),
        ));
    }
    Ok(())
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > config.max_text_len {
        return Err(CoreError::Domain(format!(
            "token sequence length {} outside [1, {}]",
            tokens.len(),
            config.max_text_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab) {
        return Err(CoreError::Domain(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab
        )));
    }
    Ok(())
}

/// Image preprocessing into the first-layer feature matrix. Pixels scale to
/// [0, 1]; mlp-small averages 4x4 blocks, conv-small unrolls 8x8 patches.
/// Images carry no gradients, so this runs outside the tape.
pub fn image_features(config: &ModelConfig, images: &[&Tensor]) -> Result<Tensor> {
    let side = config.image_side;
    match config.backbone {
        Backbone::MlpSmall => {
            let g = side / MLP_POOL;
            let mut data = Vec::with_capacity(images.len() * g * g);
            for img in images {
                check_image(config, img)?;
                for br in 0..g {
                    for bc in 0..g {
                        let mut acc = 0.0f64;
                        for r in 0..MLP_POOL {
                            for c in 0..MLP_POOL {
                                acc += img.at2(br * MLP_POOL + r, bc * MLP_POOL + c) as f64;
                            }
                        }
                        data.push((acc / (MLP_POOL * MLP_POOL) as f64 / 255.0) as f32);
                    }
                }
            }
            Tensor::new(vec![images.len(), g * g], data)
        }
        Backbone::ConvSmall => {
            let g = side / CONV_PATCH;
            let pd = CONV_PATCH * CONV_PATCH;
            let mut data = Vec::with_capacity(images.len() * g * g * pd);
            for img in images {
                check_image(config, img)?;
                for pr in 0..g {
                    for pc in 0..g {
                        for r in 0..CONV_PATCH {
                            for c in 0..CONV_PATCH {
                                data.push(
                                    img.at2(pr * CONV_PATCH + r, pc * CONV_PATCH + c) / 255.0,
                                );
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![images.len() * g * g, pd], data)
        }
    }
}

/// Batched image forward pass on a tape: returns a [B, h] matrix of
/// unit-normalized embeddings.
pub fn encode_images_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ParamVars,
    images: &[&Tensor],
) -> Result<Var> {
    let feats = image_features(config, images)?;
    let x = tape.constant(&feats);
    match config.backbone {
        Backbone::MlpSmall => {
            let h1 = tape.matmul(x, vars.img_w1())?;
            let h1 = tape.add_row(h1, vars.img_b1())?;
            let h1 = tape.relu(h1);
            let h2 = tape.matmul(h1, vars.img_w2())?;
            let h2 = tape.add_row(h2, vars.img_b2())?;
            tape.row_normalize(h2)
        }
        Backbone::ConvSmall => {
            let g = config.image_side / CONV_PATCH;
            let h1 = tape.matmul(x, vars.img_w1())?;
            let h1 = tape.add_row(h1, vars.img_b1())?;
            let h1 = tape.relu(h1);
            let flat = tape.reshape(h1, vec![images.len(), g * g * CONV_CHANNELS])?;
            let h2 = tape.matmul(flat, vars.img_w2())?;
            let h2 = tape.add_row(h2, vars.img_b2())?;
            tape.row_normalize(h2)
        }
    }
}

/// Batched text forward pass on a tape: returns a [B, h] matrix of
/// unit-normalized embeddings.
pub fn encode_texts_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ParamVars,
    token_seqs: &[Vec<u32>],
) -> Result<Var> {
    for seq in token_seqs {
        check_tokens(config, seq)?;
    }
    let pooled = tape.embed_mean(vars.text_embed(), token_seqs)?;
    let t = tape.matmul(pooled, vars.txt_w())?;
    let t = tape.add_row(t, vars.txt_b())?;
    tape.row_normalize(t)
}

/// Unit-normalized embedding of a single image.
pub fn encode_image(params: &EncoderParams, image: &Tensor) -> Result<Tensor> {
    let batch = encode_images(params, &[image])?;
    Ok(Tensor::new(vec![params.config.h], batch.data().to_vec())?)
}

/// Unit-normalized embeddings of a batch of images, as a [B, h] tensor.
pub fn encode_images(params: &EncoderParams, images: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let emb = encode_images_tape(&mut tape, &params.config, &vars, images)?;
    Ok(tape.value(emb))
}

/// Unit-normalized embedding of a single token sequence.
pub fn encode_text(params: &EncoderParams, tokens: &[u32]) -> Result<Tensor> {
    let batch = encode_texts(params, &[tokens.to_vec()])?;
    Ok(Tensor::new(vec![params.config.h], batch.data().to_vec())?)
}

/// Unit-normalized embeddings of a batch of token sequences.
pub fn encode_texts(params: &EncoderParams, token_seqs: &[Vec<u32>]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let emb = encode_texts_tape(&mut tape, &params.config, &vars, token_seqs)?;
    Ok(tape.value(emb))
}

/// One SGD update: `w <- w - lr * grad` for every parameter.
pub fn sgd_step(params: &mut EncoderParams, vars: &ParamVars, grads: &Gradients, lr: f64) {
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let v = vars.all[i];
        if let Some(g) = grads.get_f64(v) {
            for (w, gi) in t.data_mut().iter_mut().zip(g) {
                *w = (*w as f64 - lr * gi) as f32;
            }
        }
    }
}

const CHECKPOINT_VERSION: u32 = 1;

/// A trained model plus the bookkeeping needed to resume or audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub config_digest: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
    config_digest: String,
    seed: u64,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Write a checkpoint: length-prefixed JSON header followed by one BFMT
/// blob per parameter in declared order.
pub fn save_checkpoint<P: AsRef<Path>>(path: P, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: ckpt.params.config.clone(),
        config_digest: ckpt.config_digest.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        tensors: ckpt
            .params
            .config
            .tensor_layout()
            .into_iter()
            .map(|(n, s)| (n.to_string(), s))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for t in ckpt.params.tensors() {
        t.write_bfmt(&mut f)?;
    }
    f.flush()?;
    Ok(())
}

/// Load and validate a checkpoint. The header's shape table must agree with
/// the architecture it declares before any payload is accepted.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_buf = [0u8; 8];
    f.read_exact(&mut len_buf)
        .map_err(|_| CoreError::Format("truncated checkpoint header length".into()))?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    if header_len > 1 << 20 {
        return Err(CoreError::Format("checkpoint header too large".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| CoreError::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CoreError::Format(format!("bad checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    header.model.validate()?;
    let expected: Vec<(String, Vec<usize>)> = header
        .model
        .tensor_layout()
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();
    if header.tensors != expected {
        return Err(CoreError::Integrity(
            "checkpoint shape table does not match declared architecture".into(),
        ));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let t = Tensor::read_bfmt(&mut f)?;
        if t.shape() != shape.as_slice() {
            return Err(CoreError::Integrity(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        tensors.push(t);
    }
    let mut it = tensors.into_iter();
    let params = EncoderParams {
        config: header.model,
        img_w1: it.next().unwrap(),
        img_b1: it.next().unwrap(),
        img_w2: it.next().unwrap(),
        img_b2: it.next().unwrap(),
        text_embed: it.next().unwrap(),
        txt_w: it.next().unwrap(),
        txt_b: it.next().unwrap(),
    };
    if !params.is_finite() {
        return Err(CoreError::Integrity(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(Checkpoint {
        params,
        config_digest: header.config_digest,
        seed: header.seed,
        step: header.step,
    })
}
