//! The attack surface: label-space semantic matrix, contrastive and
//! semantic-matching losses, per-batch poisoning (BadMatch), embedding
//! separation fine-tuning (BadDist), and an alignment-to-target baseline
//! (BadEncoder-lite).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVector, Sample};
use crate::error::{CoreError, Result};
use crate::model::{
    encode_images, encode_images_tape, encode_texts_tape, register_params, sgd_step,
    EncoderParams,
};
use crate::ops;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::triggers::{resolve_trigger_image, apply_patch, apply_fourier_with_trigger, TriggerSpec};

/// Batch-level cosine matrix between image-label rows and text-label rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    pub values: Tensor,
    pub poisoned: Vec<bool>,
}

/// Batch-level cosine matrix between image and text embeddings, with the
/// softmax temperature used to read it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMatrix {
    pub logits: Tensor,
    pub tau: f32,
}

impl PredictiveMatrix {
    /// Cosines of unit-normalized embedding rows: logits[i][j] is
    /// image i against text j.
    pub fn from_embeddings(image_emb: &Tensor, text_emb: &Tensor, tau: f32) -> Result<Self> {
        if image_emb.rank() != 2 || image_emb.shape() != text_emb.shape() {
            return Err(CoreError::Shape(
                "predictive matrix needs matching [N,h] embedding matrices".into(),
            ));
        }
        let (n, h) = (image_emb.shape()[0], image_emb.shape()[1]);
        let mut logits = vec![0.0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                logits[i * n + j] = ops::cosine_sim_slices(
                    &image_emb.data()[i * h..(i + 1) * h],
                    &text_emb.data()[j * h..(j + 1) * h],
                )?;
            }
        }
        Ok(PredictiveMatrix {
            logits: Tensor::new(vec![n, n], logits)?,
            tau,
        })
    }
}

/// Hyperparameters of one attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Poison proportion: each sample in a batch is flipped independently
    /// with this probability.
    pub p: f32,
    pub target_label: LabelVector,
    pub trigger: TriggerSpec,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Contrastive temperature.
    pub tau: f32,
    /// Temperature of the softmax over semantic-matrix rows.
    pub sm_tau: f32,
    /// Average the loss over both pairing directions.
    pub symmetric: bool,
    pub lambda1: f32,
    pub lambda2: f32,
    pub baddist_lr: f64,
    pub baddist_epochs: u64,
    pub badencoder_a1: f32,
    pub badencoder_a2: f32,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(target_label: LabelVector, trigger: TriggerSpec, seed: u64) -> Self {
        AttackConfig {
            p: 0.2,
            target_label,
            trigger,
            iterations: 2000,
            batch_size: 32,
            lr: 2.0,
            tau: 0.07,
            sm_tau: 0.07,
            symmetric: false,
            lambda1: 5.0,
            lambda2: 1.0,
            baddist_lr: 1e-4,
            baddist_epochs: 200,
            badencoder_a1: 1.0,
            badencoder_a2: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(CoreError::Config(format!("p {} outside [0, 1]", self.p)));
        }
        if !(self.tau > 0.0) || !(self.sm_tau > 0.0) {
            return Err(CoreError::Config("temperatures must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(CoreError::Config("lambda weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        self.trigger.validate()
    }
}

/// Trigger with its Fourier source image resolved once.
pub struct TriggerApplier {
    spec: TriggerSpec,
    resolved: Option<Tensor>,
}

impl TriggerApplier {
    pub fn new(spec: &TriggerSpec, image_side: usize) -> Result<Self> {
        spec.validate()?;
        let resolved = match spec {
            TriggerSpec::Fourier { trigger_image, .. } => Some(resolve_trigger_image(
                trigger_image,
                image_side,
                image_side,
            )?),
            TriggerSpec::Patch { .. } => None,
        };
        Ok(TriggerApplier {
            spec: spec.clone(),
            resolved,
        })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match &self.spec {
            TriggerSpec::Patch { .. } => apply_patch(image, &self.spec),
            TriggerSpec::Fourier { alpha, beta, .. } => apply_fourier_with_trigger(
                image,
                *alpha as f64,
                *beta as f64,
                self.resolved.as_ref().expect("resolved at construction"),
            ),
        }
    }
}

/// Cosine matrix of two label-vector lists: SM[i][j] compares image label i
/// with text label j. One-hot rows give 1 for same class, 0 otherwise.
pub fn build_semantic_matrix(
    image_labels: &[LabelVector],
    text_labels: &[LabelVector],
) -> Result<SemanticMatrix> {
    if image_labels.len() != text_labels.len() || image_labels.is_empty() {
        return Err(CoreError::Shape(
            "semantic matrix needs equal, non-empty label lists".into(),
        ));
    }
    let n = image_labels.len();
    let k = image_labels[0].width();
    for l in image_labels.iter().chain(text_labels) {
        if l.width() != k {
            return Err(CoreError::Shape("label width mismatch".into()));
        }
        if l.bits().iter().all(|&b| b == 0) {
            return Err(CoreError::Domain("label vector has no set bit".into()));
        }
    }
    let img: Vec<Vec<f32>> = image_labels.iter().map(|l| l.as_f32()).collect();
    let txt: Vec<Vec<f32>> = text_labels.iter().map(|l| l.as_f32()).collect();
    let img_norms: Vec<f64> = img.iter().map(|r| ops::l2_norm(r)).collect();
    let txt_norms: Vec<f64> = txt.iter().map(|r| ops::l2_norm(r)).collect();
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] =
                (ops::dot(&img[i], &txt[j]) / (img_norms[i] * txt_norms[j])) as f32;
        }
    }
    Ok(SemanticMatrix {
        values: Tensor::new(vec![n, n], values)?,
        poisoned: vec![false; n],
    })
}

/// Per-pair negative log-likelihood of the contrastive softmax over text
/// columns: `nll[i][j] = -log softmax_j(logits[i][:] / tau)[j]`.
pub fn contrastive_nll(pm: &PredictiveMatrix) -> Result<Tensor> {
    let probs = ops::softmax_rows(&pm.logits, pm.tau)?;
    let (n, m) = (probs.shape()[0], probs.shape()[1]);
    let mut out = vec![0.0f32; n * m];
    for (i, &p) in probs.data().iter().enumerate() {
        out[i] = -(p.ln());
    }
    Tensor::new(vec![n, m], out)
}

/// Semantic matching loss: softmax over each semantic-matrix row weights
/// the per-pair NLL, averaged over rows.
pub fn semantic_matching_loss(sm: &SemanticMatrix, nll: &Tensor, sm_tau: f32) -> Result<f32> {
    if sm.values.shape() != nll.shape() {
        return Err(CoreError::Shape(
            "semantic matrix and NLL matrix shapes differ".into(),
        ));
    }
    let n = sm.values.shape()[0];
    let weights = ops::softmax_rows(&sm.values, sm_tau)?;
    let mut acc = 0.0f64;
    for (w, y) in weights.data().iter().zip(nll.data()) {
        acc += *w as f64 * *y as f64;
    }
    Ok((acc / n as f64) as f32)
}

/// Tape route of the semantic matching loss for one pairing direction:
/// image-embedding rows against text-embedding columns, weighted by the
/// softmax-normalized semantic matrix.
fn semantic_matching_loss_tape(
    tape: &mut Tape,
    img_emb: Var,
    txt_emb: Var,
    sm_values: &Tensor,
    tau: f32,
    sm_tau: f32,
) -> Result<Var> {
    let n = sm_values.shape()[0];
    let weights = ops::softmax_rows(sm_values, sm_tau)?;
    let w = tape.constant(&weights);
    let pm = tape.matmul_tb(img_emb, txt_emb)?;
    let ls = tape.log_softmax_rows(pm, tau as f64)?;
    let nll = tape.scale(ls, -1.0);
    let weighted = tape.mul(w, nll)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Flip each sample independently with probability `p`: image label becomes
/// the target label and the trigger is stamped into the image. Texts and
/// text labels are never touched. Returns the poison mask.
pub fn badmatch_poison_batch(
    batch: &mut [Sample],
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let side = batch
        .first()
        .map(|s| s.image.shape()[0])
        .unwrap_or(64);
    let applier = TriggerApplier::new(&config.trigger, side)?;
    poison_batch_with(batch, config.p, &config.target_label, &applier, rng)
}

/// Same as [`badmatch_poison_batch`] with a pre-resolved trigger.
pub fn poison_batch_with(
    batch: &mut [Sample],
    p: f32,
    target_label: &LabelVector,
    applier: &TriggerApplier,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let mut mask = vec![false; batch.len()];
    for (i, sample) in batch.iter_mut().enumerate() {
        if rng.gen::<f32>() < p {
            if target_label.width() != sample.image_label.width() {
                return Err(CoreError::Shape(
                    "target label width does not match batch labels".into(),
                ));
            }
            sample.image_label = target_label.clone();
            sample.image = applier.apply(&sample.image)?;
            mask[i] = true;
        }
    }
    Ok(mask)
}

/// One row of a persisted loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub clean_cos: Option<f64>,
    pub poison_cos: Option<f64>,
}

/// CSV with columns `step,loss`; separation runs append
/// `clean_cos,poison_cos`.
pub fn write_trace_csv<P: AsRef<std::path::Path>>(path: P, rows: &[TraceRow]) -> Result<()> {
    use std::io::Write;
    let with_cos = rows.iter().any(|r| r.clean_cos.is_some());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if with_cos {
        writeln!(f, "step,loss,clean_cos,poison_cos")?;
    } else {
        writeln!(f, "step,loss")?;
    }
    for r in rows {
        if with_cos {
            writeln!(
                f,
                "{},{},{},{}",
                r.step,
                r.loss,
                r.clean_cos.unwrap_or(f64::NAN),
                r.poison_cos.unwrap_or(f64::NAN)
            )?;
        } else {
            writeln!(f, "{},{}", r.step, r.loss)?;
        }
    }
    Ok(())
}

fn sample_batch(dataset: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..batch_size)
        .map(|_| dataset.samples[rng.gen_range(0..dataset.samples.len())].clone())
        .collect()
}

/// Semantic-matching training with per-batch poisoning. `p = 0` reduces to
/// vanilla clean training. Resumable: step `s` always derives its batch and
/// poison draws from `(seed, s)` alone.
pub fn train_badmatch(
    model: &EncoderParams,
    dataset: &Dataset,
    config: &AttackConfig,
) -> Result<(EncoderParams, Vec<TraceRow>)> {
    train_badmatch_from(model, dataset, config, 0, config.iterations)
}

/// Run steps `[start_step, end_step)` of BadMatch training.
pub fn train_badmatch_from(
    model: &EncoderParams,
    dataset: &Dataset,
    config: &AttackConfig,
    start_step: u64,
    end_step: u64,
) -> Result<(EncoderParams, Vec<TraceRow>)> {
    config.validate()?;
    if dataset.samples.is_empty() {
        return Err(CoreError::Domain("dataset is empty".into()));
    }
    if !model.is_finite() {
        return Err(CoreError::Numeric("model parameters are not finite".into()));
    }
    let mut params = model.clone();
    let applier = TriggerApplier::new(&config.trigger, dataset.image_side)?;
    let mut trace = Vec::with_capacity((end_step - start_step) as usize);
    for step in start_step..end_step {
        let mut batch_rng = rng::step_rng(config.seed, "badmatch-batch", step);
        let mut batch = sample_batch(dataset, config.batch_size, &mut batch_rng);
        let mut poison_rng = rng::step_rng(config.seed, "badmatch-poison", step);
        let mask = poison_batch_with(
            &mut batch,
            config.p,
            &config.target_label,
            &applier,
            &mut poison_rng,
        )?;

        let image_labels: Vec<LabelVector> =
            batch.iter().map(|s| s.image_label.clone()).collect();
        let text_labels: Vec<LabelVector> =
            batch.iter().map(|s| s.text_label.clone()).collect();
        let mut sm = build_semantic_matrix(&image_labels, &text_labels)?;
        sm.poisoned = mask;

        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, true);
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let tokens: Vec<Vec<u32>> = batch.iter().map(|s| s.tokens.clone()).collect();
        let img_emb = encode_images_tape(&mut tape, &params.config, &vars, &images)?;
        let txt_emb = encode_texts_tape(&mut tape, &params.config, &vars, &tokens)?;

        let loss = if config.symmetric {
            let fwd = semantic_matching_loss_tape(
                &mut tape, img_emb, txt_emb, &sm.values, config.tau, config.sm_tau,
            )?;
            let n = sm.values.shape()[0];
            let mut smt = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                for j in 0..n {
                    smt.set2(i, j, sm.values.at2(j, i));
                }
            }
            let bwd = semantic_matching_loss_tape(
                &mut tape, txt_emb, img_emb, &smt, config.tau, config.sm_tau,
            )?;
            let s = tape.add(fwd, bwd)?;
            tape.scale(s, 0.5)
        } else {
            semantic_matching_loss_tape(
                &mut tape, img_emb, txt_emb, &sm.values, config.tau, config.sm_tau,
            )?
        };

        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(CoreError::Numeric(format!(
                "badmatch aborted at step {step}: loss {loss_val}"
            )));
        }
        let grads = tape.backward(loss)?;
        if grads.max_abs(&vars.all) > 1e6 {
            return Err(CoreError::Numeric(format!(
                "badmatch aborted at step {step}: loss {loss_val}, grad max {}",
                grads.max_abs(&vars.all)
            )));
        }
        sgd_step(&mut params, &vars, &grads, config.lr);
        trace.push(TraceRow {
            step,
            loss: loss_val,
            clean_cos: None,
            poison_cos: None,
        });
    }
    Ok((params, trace))
}

/// Per-batch embeddings of clean and poisoned data through the frozen clean
/// model (`c`, `b`) and the trainable backdoored model (`c_prime`,
/// `b_prime`). All rows unit-norm.
#[derive(Debug, Clone)]
pub struct BadDistEmbeddings {
    pub c: Tensor,
    pub c_prime: Tensor,
    pub b: Tensor,
    pub b_prime: Tensor,
}

/// Separation loss: keep clean embeddings aligned across models, push
/// poisoned embeddings apart.
/// `L = lambda1 * (-mean_i cos(c_i, c'_i)) + lambda2 * mean_i cos(b_i, b'_i)`.
pub fn baddist_loss(e: &BadDistEmbeddings, lambda1: f32, lambda2: f32) -> Result<f32> {
    for (name, t) in [
        ("c", &e.c),
        ("c_prime", &e.c_prime),
        ("b", &e.b),
        ("b_prime", &e.b_prime),
    ] {
        if t.rank() != 2 || t.shape() != e.c.shape() {
            return Err(CoreError::Shape(format!(
                "baddist embeddings must share an [N,h] shape; {name} has {:?}",
                t.shape()
            )));
        }
    }
    let (n, h) = (e.c.shape()[0], e.c.shape()[1]);
    let mut clean_acc = 0.0f64;
    let mut poison_acc = 0.0f64;
    for i in 0..n {
        clean_acc += ops::cosine_sim_slices(
            &e.c.data()[i * h..(i + 1) * h],
            &e.c_prime.data()[i * h..(i + 1) * h],
        )? as f64;
        poison_acc += ops::cosine_sim_slices(
            &e.b.data()[i * h..(i + 1) * h],
            &e.b_prime.data()[i * h..(i + 1) * h],
        )? as f64;
    }
    let mean_clean = clean_acc / n as f64;
    let mean_poison = poison_acc / n as f64;
    Ok((lambda1 as f64 * (-mean_clean) + lambda2 as f64 * mean_poison) as f32)
}

/// Shared shape of the two separation-style fine-tuning loops.
struct SeparationRun<'a> {
    clean: &'a EncoderParams,
    finetune: &'a Dataset,
    config: &'a AttackConfig,
    /// Per-sample frozen targets for the clean-alignment term.
    clean_targets: Tensor,
    /// Per-sample frozen targets for the trigger term, and its sign:
    /// -1 pulls towards the target (alignment), +1 pushes away (distance).
    trigger_targets: Tensor,
    trigger_sign: f64,
    clean_weight: f64,
    trigger_weight: f64,
    stage: &'a str,
}

fn run_separation(r: SeparationRun<'_>) -> Result<(EncoderParams, Vec<TraceRow>)> {
    r.config.validate()?;
    if r.finetune.samples.is_empty() {
        return Err(CoreError::Domain("finetune subset is empty".into()));
    }
    let mut params = r.clean.clone();
    let applier = TriggerApplier::new(&r.config.trigger, r.finetune.image_side)?;
    let triggered: Vec<Tensor> = r
        .finetune
        .samples
        .iter()
        .map(|s| applier.apply(&s.image))
        .collect::<Result<_>>()?;
    let h = params.config.h;
    let n_samples = r.finetune.samples.len();
    let batch = r.config.batch_size.min(n_samples);
    let mut trace = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..r.config.baddist_epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut shuffle_rng = rng::step_rng(r.config.seed, r.stage, epoch);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, &params, true);
            let clean_imgs: Vec<&Tensor> =
                chunk.iter().map(|&i| &r.finetune.samples[i].image).collect();
            let trig_imgs: Vec<&Tensor> = chunk.iter().map(|&i| &triggered[i]).collect();
            let c_prime = encode_images_tape(&mut tape, &params.config, &vars, &clean_imgs)?;
            let b_prime = encode_images_tape(&mut tape, &params.config, &vars, &trig_imgs)?;

            let gather = |src: &Tensor| -> Result<Tensor> {
                let mut data = Vec::with_capacity(chunk.len() * h);
                for &i in chunk {
                    data.extend_from_slice(&src.data()[i * h..(i + 1) * h]);
                }
                Tensor::new(vec![chunk.len(), h], data)
            };
            let c_t = gather(&r.clean_targets)?;
            let b_t = gather(&r.trigger_targets)?;
            let c_const = tape.constant(&c_t);
            let b_const = tape.constant(&b_t);

            let clean_cos = tape.row_dot(c_const, c_prime)?;
            let poison_cos = tape.row_dot(b_const, b_prime)?;
            let mean_clean = tape.mean(clean_cos);
            let mean_poison = tape.mean(poison_cos);
            let term_clean = tape.scale(mean_clean, -r.clean_weight);
            let term_poison = tape.scale(mean_poison, r.trigger_sign * r.trigger_weight);
            let loss = tape.add(term_clean, term_poison)?;

            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "{} aborted at step {step}: loss {loss_val}",
                    r.stage
                )));
            }
            let grads = tape.backward(loss)?;
            sgd_step(&mut params, &vars, &grads, r.config.baddist_lr);
            trace.push(TraceRow {
                step,
                loss: loss_val,
                clean_cos: Some(tape.scalar(mean_clean)),
                poison_cos: Some(tape.scalar(mean_poison)),
            });
            step += 1;
        }
    }
    Ok((params, trace))
}

/// BadDist: start from a copy of the frozen clean model, keep clean-data
/// embeddings in place and push trigger-data embeddings away from where the
/// clean model puts them. The clean model itself is never modified.
pub fn train_baddist(
    clean: &EncoderParams,
    finetune: &Dataset,
    config: &AttackConfig,
) -> Result<(EncoderParams, Vec<TraceRow>)> {
    let applier = TriggerApplier::new(&config.trigger, finetune.image_side)?;
    let clean_imgs: Vec<&Tensor> = finetune.samples.iter().map(|s| &s.image).collect();
    let clean_targets = encode_images(clean, &clean_imgs)?;
    let triggered: Vec<Tensor> = finetune
        .samples
        .iter()
        .map(|s| applier.apply(&s.image))
        .collect::<Result<_>>()?;
    let trig_refs: Vec<&Tensor> = triggered.iter().collect();
    let trigger_targets = encode_images(clean, &trig_refs)?;
    run_separation(SeparationRun {
        clean,
        finetune,
        config,
        clean_targets,
        trigger_targets,
        trigger_sign: 1.0,
        clean_weight: config.lambda1 as f64,
        trigger_weight: config.lambda2 as f64,
        stage: "baddist-epoch",
    })
}

/// BadEncoder-lite: pull trigger-data embeddings towards one frozen target
/// image embedding while keeping clean-data embeddings in place.
pub fn train_badencoder_lite(
    clean: &EncoderParams,
    finetune: &Dataset,
    target_image: &Tensor,
    config: &AttackConfig,
) -> Result<(EncoderParams, Vec<TraceRow>)> {
    let clean_imgs: Vec<&Tensor> = finetune.samples.iter().map(|s| &s.image).collect();
    let clean_targets = encode_images(clean, &clean_imgs)?;
    let target_emb = crate::model::encode_image(clean, target_image)?;
    let mut tiled = Vec::with_capacity(finetune.samples.len() * clean.config.h);
    for _ in 0..finetune.samples.len() {
        tiled.extend_from_slice(target_emb.data());
    }
    let trigger_targets = Tensor::new(vec![finetune.samples.len(), clean.config.h], tiled)?;
    run_separation(SeparationRun {
        clean,
        finetune,
        config,
        clean_targets,
        trigger_targets,
        trigger_sign: -1.0,
        clean_weight: config.badencoder_a2 as f64,
        trigger_weight: config.badencoder_a1 as f64,
        stage: "badencoder-epoch",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, DataConfig, Split};
    use crate::model::{init_params, Backbone, ModelConfig};
    use crate::tape::grad_check;

    fn labels(classes: &[usize], k: usize) -> Vec<LabelVector> {
        classes
            .iter()
            .map(|&c| LabelVector::one_hot(c, k).unwrap())
            .collect()
    }

    #[test]
    fn semantic_matrix_one_hot_batch() {
        let img = labels(&[0, 0, 1], 2);
        let txt = labels(&[0, 1, 1], 2);
        let sm = build_semantic_matrix(&img, &txt).unwrap();
        let expected = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(sm.values.data(), &expected);
    }

    #[test]
    fn semantic_matrix_flip_moves_mass_to_other_class() {
        let mut img = labels(&[0, 0, 1], 2);
        let txt = labels(&[0, 1, 1], 2);
        img[0] = LabelVector::one_hot(1, 2).unwrap();
        let sm = build_semantic_matrix(&img, &txt).unwrap();
        assert_eq!(&sm.values.data()[0..3], &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn semantic_matrix_multi_hot_value() {
        let img = vec![LabelVector::new(vec![1, 1, 0]).unwrap()];
        let txt = vec![LabelVector::new(vec![0, 1, 1]).unwrap()];
        let sm = build_semantic_matrix(&img, &txt).unwrap();
        assert!((sm.values.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn semantic_matrix_matches_direct_cosine_oracle_bitwise() {
        use rand::Rng;
        let mut r = rng::stage_rng(0, "sm-oracle");
        for _ in 0..200 {
            let n = r.gen_range(1..=16);
            let k = r.gen_range(1..=8);
            let rand_label = |r: &mut rand_chacha::ChaCha8Rng| loop {
                let bits: Vec<u8> = (0..k).map(|_| r.gen_range(0..=1)).collect();
                if bits.iter().any(|&b| b == 1) {
                    return LabelVector::new(bits).unwrap();
                }
            };
            let img: Vec<LabelVector> = (0..n).map(|_| rand_label(&mut r)).collect();
            let txt: Vec<LabelVector> = (0..n).map(|_| rand_label(&mut r)).collect();
            let sm = build_semantic_matrix(&img, &txt).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let a = Tensor::from_vec(img[i].as_f32());
                    let b = Tensor::from_vec(txt[j].as_f32());
                    let oracle = ops::cosine_sim(&a, &b).unwrap();
                    assert_eq!(
                        sm.values.at2(i, j).to_bits(),
                        oracle.to_bits(),
                        "mismatch at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn contrastive_nll_single_element_is_zero() {
        let pm = PredictiveMatrix {
            logits: Tensor::new(vec![1, 1], vec![0.73]).unwrap(),
            tau: 0.07,
        };
        let nll = contrastive_nll(&pm).unwrap();
        assert!(nll.data()[0].abs() < 1e-7);
    }

    #[test]
    fn contrastive_nll_uniform_logits_give_log_n() {
        let n = 5;
        let pm = PredictiveMatrix {
            logits: Tensor::new(vec![n, n], vec![0.25; n * n]).unwrap(),
            tau: 0.07,
        };
        let nll = contrastive_nll(&pm).unwrap();
        for &v in nll.data() {
            assert!((v - (n as f32).ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn contrastive_nll_closed_form_row() {
        // Logits (0, tau*ln 2) give probabilities (1/3, 2/3).
        let tau = 0.07f32;
        let pm = PredictiveMatrix {
            logits: Tensor::new(vec![1, 2], vec![0.0, tau * (2.0f32).ln()]).unwrap(),
            tau,
        };
        let nll = contrastive_nll(&pm).unwrap();
        assert!((nll.data()[0] - -(1.0f32 / 3.0).ln()).abs() < 1e-5);
        assert!((nll.data()[1] - -(2.0f32 / 3.0).ln()).abs() < 1e-5);
    }

    #[test]
    fn semantic_loss_uniform_case_is_log_n() {
        let n = 4;
        let sm = SemanticMatrix {
            values: Tensor::new(vec![n, n], vec![0.5; n * n]).unwrap(),
            poisoned: vec![false; n],
        };
        let nll = Tensor::new(vec![n, n], vec![(n as f32).ln(); n * n]).unwrap();
        let l = semantic_matching_loss(&sm, &nll, 1.0).unwrap();
        assert!((l - (n as f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn semantic_loss_single_sample_is_zero() {
        let sm = SemanticMatrix {
            values: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            poisoned: vec![false],
        };
        let nll = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(semantic_matching_loss(&sm, &nll, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn semantic_loss_matches_brute_force_summation() {
        use rand::Rng;
        let mut r = rng::stage_rng(1, "sml-oracle");
        let n = 4;
        let sm_vals: Vec<f32> = (0..n * n).map(|_| r.gen_range(0.0..1.0)).collect();
        let nll_vals: Vec<f32> = (0..n * n).map(|_| r.gen_range(0.0..3.0)).collect();
        let sm = SemanticMatrix {
            values: Tensor::new(vec![n, n], sm_vals.clone()).unwrap(),
            poisoned: vec![false; n],
        };
        let nll = Tensor::new(vec![n, n], nll_vals.clone()).unwrap();
        let tau = 0.3;
        let got = semantic_matching_loss(&sm, &nll, tau).unwrap();

        // Brute-force double loop with its own softmax.
        let mut expected = 0.0f64;
        for i in 0..n {
            let row = &sm_vals[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row
                .iter()
                .map(|&v| (((v - max) / tau) as f64).exp())
                .sum();
            for j in 0..n {
                let w = (((row[j] - max) / tau) as f64).exp() / denom;
                expected += w * nll_vals[i * n + j] as f64;
            }
        }
        expected /= n as f64;
        assert!((got as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn semantic_loss_grad_check_on_random_batch() {
        use rand::Rng;
        let mut r = rng::stage_rng(2, "sml-grad");
        let (n, h) = (8, 16);
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            Tensor::new(
                vec![n, h],
                (0..n * h).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
            )
            .unwrap()
            .with_grad()
        };
        let img = mk(&mut r);
        let txt = mk(&mut r);
        let sm_weights = ops::softmax_rows(
            &Tensor::new(
                vec![n, n],
                (0..n * n).map(|_| r.gen_range(0.0..1.0)).collect::<Vec<f32>>(),
            )
            .unwrap(),
            0.2,
        )
        .unwrap();
        let err = grad_check(&[img, txt], 1e-3, move |tape, vars| {
            let ie = tape.row_normalize(vars[0])?;
            let te = tape.row_normalize(vars[1])?;
            let w = tape.constant(&sm_weights);
            let pm = tape.matmul_tb(ie, te)?;
            let ls = tape.log_softmax_rows(pm, 0.07)?;
            let nll = tape.scale(ls, -1.0);
            let weighted = tape.mul(w, nll)?;
            let s = tape.sum(weighted);
            Ok(tape.scale(s, 1.0 / n as f64))
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    fn tiny_dataset(seed: u64, classes: usize) -> Dataset {
        let cfg = DataConfig {
            classes,
            train_per_class: 16,
            finetune_per_class: 8,
            test_per_class: 8,
            image_side: 64,
            seed,
        };
        gen_synthetic_dataset(&cfg, Split::Train).unwrap()
    }

    fn tiny_attack_config(seed: u64) -> AttackConfig {
        let mut cfg = AttackConfig::new(
            LabelVector::one_hot(1, 2).unwrap(),
            TriggerSpec::white_patch(),
            seed,
        );
        cfg.iterations = 5;
        cfg.batch_size = 8;
        cfg.baddist_epochs = 2;
        cfg
    }

    #[test]
    fn poison_extremes() {
        let ds = tiny_dataset(3, 2);
        let mut batch: Vec<Sample> = ds.samples[..8].to_vec();
        let mut cfg = tiny_attack_config(0);
        cfg.p = 0.0;
        let mut r = rng::stage_rng(0, "poison");
        let mask = badmatch_poison_batch(&mut batch, &cfg, &mut r).unwrap();
        assert!(mask.iter().all(|&m| !m));
        assert_eq!(batch, ds.samples[..8].to_vec());

        cfg.p = 1.0;
        let mask = badmatch_poison_batch(&mut batch, &cfg, &mut r).unwrap();
        assert!(mask.iter().all(|&m| m));
        for (s, orig) in batch.iter().zip(&ds.samples[..8]) {
            assert_eq!(s.image_label, cfg.target_label);
            assert_eq!(s.text_label, orig.text_label);
            assert_eq!(s.tokens, orig.tokens);
            assert_eq!(s.image.at2(60, 30), 245.0);
        }
    }

    #[test]
    fn poison_fraction_statistics() {
        let ds = tiny_dataset(4, 2);
        let mut cfg = tiny_attack_config(0);
        cfg.p = 0.2;
        let mut r = rng::stage_rng(7, "poison-stats");
        let mut poisoned = 0u32;
        let mut total = 0u32;
        for _ in 0..1250 {
            let mut batch: Vec<Sample> = ds.samples[..8].to_vec();
            let mask = badmatch_poison_batch(&mut batch, &cfg, &mut r).unwrap();
            poisoned += mask.iter().filter(|&&m| m).count() as u32;
            total += 8;
        }
        let frac = poisoned as f64 / total as f64;
        assert!((0.19..=0.21).contains(&frac), "poisoned fraction {frac}");
    }

    #[test]
    fn badmatch_training_is_seed_deterministic() {
        let ds = tiny_dataset(5, 2);
        let model = init_params(&ModelConfig::default(), 1).unwrap();
        let cfg = tiny_attack_config(9);
        let (a, _) = train_badmatch(&model, &ds, &cfg).unwrap();
        let (b, _) = train_badmatch(&model, &ds, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn badmatch_resume_matches_uninterrupted_run() {
        // Train 201 steps in one go, and as 200 steps + checkpoint + 1 step.
        let ds = tiny_dataset(6, 2);
        let model = init_params(&ModelConfig::default(), 2).unwrap();
        let mut cfg = tiny_attack_config(11);
        cfg.batch_size = 4;
        cfg.iterations = 201;
        let (full, full_trace) = train_badmatch(&model, &ds, &cfg).unwrap();

        let (upto, _) = train_badmatch_from(&model, &ds, &cfg, 0, 200).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step200.ckpt");
        crate::model::save_checkpoint(
            &path,
            &crate::model::Checkpoint {
                params: upto,
                config_digest: "t".into(),
                seed: cfg.seed,
                step: 200,
            },
        )
        .unwrap();
        let resumed = crate::model::load_checkpoint(&path).unwrap();
        let (cont, cont_trace) =
            train_badmatch_from(&resumed.params, &ds, &cfg, resumed.step, 201).unwrap();
        assert_eq!(full.digest(), cont.digest());
        assert_eq!(full_trace[200].loss.to_bits(), cont_trace[0].loss.to_bits());
    }

    #[test]
    fn baddist_loss_identity_copy() {
        // Backdoor model identical to the clean model: every cosine is 1,
        // so the loss is -lambda1 + lambda2.
        use rand::Rng;
        let mut r = rng::stage_rng(3, "bd");
        let (n, h) = (6, 8);
        let mut rows = Vec::with_capacity(n * h);
        for _ in 0..n {
            let v: Vec<f32> = (0..h).map(|_| r.gen_range(-1.0..1.0)).collect();
            let norm = ops::l2_norm(&v);
            rows.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
        }
        let e = Tensor::new(vec![n, h], rows).unwrap();
        let emb = BadDistEmbeddings {
            c: e.clone(),
            c_prime: e.clone(),
            b: e.clone(),
            b_prime: e.clone(),
        };
        let l = baddist_loss(&emb, 5.0, 1.0).unwrap();
        assert!((l - -4.0).abs() < 1e-5, "loss {l}");
        assert_eq!(baddist_loss(&emb, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn baddist_loss_analytic_extremum() {
        use rand::Rng;
        let mut r = rng::stage_rng(4, "bd2");
        let (n, h) = (4, 8);
        let mut rows = Vec::with_capacity(n * h);
        for _ in 0..n {
            let v: Vec<f32> = (0..h).map(|_| r.gen_range(-1.0..1.0)).collect();
            let norm = ops::l2_norm(&v);
            rows.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
        }
        let e = Tensor::new(vec![n, h], rows).unwrap();
        let neg = Tensor::new(vec![n, h], e.data().iter().map(|&x| -x).collect()).unwrap();
        let emb = BadDistEmbeddings {
            c: e.clone(),
            c_prime: e.clone(),
            b: e,
            b_prime: neg,
        };
        let l = baddist_loss(&emb, 5.0, 1.0).unwrap();
        assert!((l - -6.0).abs() < 1e-5, "global minimum loss {l}");
    }

    #[test]
    fn baddist_grad_check() {
        use rand::Rng;
        let mut r = rng::stage_rng(5, "bd-grad");
        let (n, h) = (8, 16);
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            Tensor::new(
                vec![n, h],
                (0..n * h).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
            )
            .unwrap()
        };
        let c = mk(&mut r);
        let b = mk(&mut r);
        let cp = mk(&mut r).with_grad();
        let bp = mk(&mut r).with_grad();
        let (l1, l2) = (5.0f64, 1.0f64);
        let err = grad_check(&[cp, bp], 1e-3, move |tape, vars| {
            let c_const = tape.constant(&c);
            let b_const = tape.constant(&b);
            let cn = tape.row_normalize(c_const)?;
            let bn = tape.row_normalize(b_const)?;
            let cpn = tape.row_normalize(vars[0])?;
            let bpn = tape.row_normalize(vars[1])?;
            let cc = tape.row_dot(cn, cpn)?;
            let pc = tape.row_dot(bn, bpn)?;
            let mc = tape.mean(cc);
            let mp = tape.mean(pc);
            let t1 = tape.scale(mc, -l1);
            let t2 = tape.scale(mp, l2);
            tape.add(t1, t2)
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn badencoder_grad_check() {
        use rand::Rng;
        let mut r = rng::stage_rng(6, "be-grad");
        let (n, h) = (8, 16);
        let target: Vec<f32> = (0..h).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tiled = Vec::new();
        for _ in 0..n {
            tiled.extend_from_slice(&target);
        }
        let target_m = Tensor::new(vec![n, h], tiled).unwrap();
        let clean_m = Tensor::new(
            vec![n, h],
            (0..n * h).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
        )
        .unwrap();
        let trig_emb = Tensor::new(
            vec![n, h],
            (0..n * h).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
        )
        .unwrap()
        .with_grad();
        let clean_emb = Tensor::new(
            vec![n, h],
            (0..n * h).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
        )
        .unwrap()
        .with_grad();
        let err = grad_check(&[trig_emb, clean_emb], 1e-3, move |tape, vars| {
            let t_const = tape.constant(&target_m);
            let c_const = tape.constant(&clean_m);
            let tn = tape.row_normalize(t_const)?;
            let cn = tape.row_normalize(c_const)?;
            let bpn = tape.row_normalize(vars[0])?;
            let cpn = tape.row_normalize(vars[1])?;
            let align = tape.row_dot(tn, bpn)?;
            let keep = tape.row_dot(cn, cpn)?;
            let ma = tape.mean(align);
            let mk_ = tape.mean(keep);
            let t1 = tape.scale(ma, -1.0);
            let t2 = tape.scale(mk_, -1.0);
            tape.add(t1, t2)
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn baddist_zero_epochs_is_identity_and_clean_model_untouched() {
        let ds = tiny_dataset(8, 2);
        let clean = init_params(&ModelConfig::default(), 3).unwrap();
        let clean_digest = clean.digest();
        let mut cfg = tiny_attack_config(13);
        cfg.baddist_epochs = 0;
        let (out, trace) = train_baddist(&clean, &ds, &cfg).unwrap();
        assert_eq!(out.digest(), clean_digest);
        assert!(trace.is_empty());

        cfg.baddist_epochs = 2;
        let (_, trace) = train_baddist(&clean, &ds, &cfg).unwrap();
        assert_eq!(clean.digest(), clean_digest, "frozen model was modified");
        assert!(trace.iter().all(|r| r.clean_cos.is_some()));
        // At initialization the copy is exact, so the first step's loss is
        // -lambda1 + lambda2.
        assert!((trace[0].loss - (-4.0)).abs() < 1e-4, "{}", trace[0].loss);
    }

    #[test]
    fn badencoder_clean_term_only_preserves_embeddings() {
        let ds = tiny_dataset(9, 2);
        let clean = init_params(&ModelConfig::default(), 4).unwrap();
        let mut cfg = tiny_attack_config(17);
        cfg.badencoder_a1 = 0.0;
        cfg.badencoder_a2 = 1.0;
        cfg.baddist_epochs = 5;
        let target = ds.samples[1].image.clone();
        let (out, _) = train_badencoder_lite(&clean, &ds, &target, &cfg).unwrap();
        for s in ds.samples.iter().take(8) {
            let a = crate::model::encode_image(&clean, &s.image).unwrap();
            let b = crate::model::encode_image(&out, &s.image).unwrap();
            let cos = ops::cosine_sim(&a, &b).unwrap();
            assert!(cos > 0.99, "clean embedding drifted: cos {cos}");
        }
    }

    #[test]
    fn trace_csv_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("plain.csv");
        write_trace_csv(
            &p1,
            &[TraceRow {
                step: 0,
                loss: 1.5,
                clean_cos: None,
                poison_cos: None,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p1).unwrap(),
            "step,loss\n0,1.5\n"
        );
        let p2 = dir.path().join("sep.csv");
        write_trace_csv(
            &p2,
            &[TraceRow {
                step: 3,
                loss: -4.0,
                clean_cos: Some(1.0),
                poison_cos: Some(1.0),
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p2).unwrap(),
            "step,loss,clean_cos,poison_cos\n3,-4,1,1\n"
        );
    }

    #[test]
    fn zero_label_row_is_domain_error() {
        // LabelVector construction already rejects empty labels, so drive
        // the check through raw bit patterns.
        assert!(LabelVector::new(vec![0, 0]).is_err());
    }

    #[test]
    fn nonfinite_model_rejected() {
        let ds = tiny_dataset(10, 2);
        let mut model = init_params(&ModelConfig::default(), 5).unwrap();
        model.img_w1.data_mut()[0] = f32::NAN;
        let cfg = tiny_attack_config(19);
        assert!(matches!(
            train_badmatch(&model, &ds, &cfg),
            Err(CoreError::Numeric(_))
        ));
    }
}
