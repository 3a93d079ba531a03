//! Bit-exact trigger application: solid pixel patches and Fourier-domain
//! amplitude blending. Both are pure functions of (image, spec).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fft::{fft2, fftshift_index, ifft2};
use crate::rng;
use crate::tensor::Tensor;

/// Where the square patch is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchAnchor {
    BottomCenter,
    BottomRight,
    Custom { row: usize, col: usize },
}

/// Source of the Fourier trigger image: a seeded procedural texture, or an
/// explicit BFMT tensor on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerImage {
    Procedural { seed: u64 },
    Bfmt { path: String },
}

impl Default for TriggerImage {
    fn default() -> Self {
        TriggerImage::Procedural { seed: 139 }
    }
}

/// Declarative trigger description, serializable inside experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TriggerSpec {
    Patch {
        value: f32,
        side: usize,
        anchor: PatchAnchor,
    },
    Fourier {
        alpha: f32,
        beta: f32,
        #[serde(default)]
        trigger_image: TriggerImage,
    },
}

impl TriggerSpec {
    /// White square at the bottom center, covering about 2% of a 64x64 image.
    pub fn white_patch() -> Self {
        TriggerSpec::Patch {
            value: 245.0,
            side: 9,
            anchor: PatchAnchor::BottomCenter,
        }
    }

    /// Black square at the bottom right corner.
    pub fn black_patch() -> Self {
        TriggerSpec::Patch {
            value: 0.0,
            side: 9,
            anchor: PatchAnchor::BottomRight,
        }
    }

    pub fn fourier_default() -> Self {
        TriggerSpec::Fourier {
            alpha: 0.2,
            beta: 0.2,
            trigger_image: TriggerImage::default(),
        }
    }

    pub fn kind_tag(&self) -> &'static str {
        match self {
            TriggerSpec::Patch { .. } => "patch",
            TriggerSpec::Fourier { .. } => "fourier",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TriggerSpec::Patch { value, side, .. } => {
                if !(0.0..=255.0).contains(value) {
                    return Err(CoreError::Config(format!(
                        "patch value {value} outside [0, 255]"
                    )));
                }
                if *side == 0 {
                    return Err(CoreError::Config("patch side must be positive".into()));
                }
            }
            TriggerSpec::Fourier { alpha, beta, .. } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(CoreError::Config(format!("alpha {alpha} outside [0, 1]")));
                }
                if !(*beta > 0.0 && *beta <= 1.0) {
                    return Err(CoreError::Config(format!("beta {beta} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Top-left corner of the patch for a given anchor, or an error when the
/// patch does not fit inside the image.
fn patch_origin(anchor: PatchAnchor, side: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let (row, col) = match anchor {
        PatchAnchor::BottomCenter => (h.checked_sub(side), Some((w.saturating_sub(side)) / 2)),
        PatchAnchor::BottomRight => (h.checked_sub(side), w.checked_sub(side)),
        PatchAnchor::Custom { row, col } => (Some(row), Some(col)),
    };
    match (row, col) {
        (Some(r), Some(c)) if r + side <= h && c + side <= w => Ok((r, c)),
        _ => Err(CoreError::Domain(format!(
            "patch of side {side} at {anchor:?} does not fit in {h}x{w} image"
        ))),
    }
}

/// Overwrite exactly `side^2` pixels with the configured value. Idempotent.
pub fn apply_patch(image: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    let TriggerSpec::Patch {
        value,
        side,
        anchor,
    } = spec
    else {
        return Err(CoreError::Domain("apply_patch needs a patch spec".into()));
    };
    if image.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "apply_patch expects an image, got shape {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (r0, c0) = patch_origin(*anchor, *side, h, w)?;
    let mut out = image.clone();
    for r in r0..r0 + side {
        for c in c0..c0 + side {
            out.set2(r, c, *value);
        }
    }
    Ok(out)
}

/// Intensity range of the procedural texture. Its midpoint is kept near the
/// synthetic dataset's mean brightness so the DC blend stays subtle.
const TRIGGER_LO: f64 = 10.0;
const TRIGGER_HI: f64 = 150.0;

/// Procedural trigger texture: a few low-frequency plaid harmonics with
/// seeded phases. Stands in for a natural trigger image while staying
/// reproducible from the seed alone.
pub fn procedural_trigger_image(seed: u64, h: usize, w: usize) -> Tensor {
    use rand::Rng;
    let mut r = rng::stage_rng(seed, "trigger-texture");
    let harmonics: Vec<(f64, f64, f64, f64, f64)> = (0..4)
        .map(|i| {
            (
                (i + 1) as f64,
                r.gen_range(0.0..std::f64::consts::TAU),
                (i + 2) as f64,
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(0.5..1.0),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let y = row as f64 / h as f64;
            let x = col as f64 / w as f64;
            let mut v = 0.0;
            for &(fr, pr, fc, pc, amp) in &harmonics {
                v += amp
                    * ((std::f64::consts::TAU * fr * y + pr).sin()
                        + (std::f64::consts::TAU * fc * x + pc).sin());
            }
            data.push(v);
        }
    }
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min {
        (TRIGGER_HI - TRIGGER_LO) / (max - min)
    } else {
        0.0
    };
    Tensor::new(
        vec![h, w],
        data.iter()
            .map(|&v| (TRIGGER_LO + (v - min) * scale) as f32)
            .collect(),
    )
    .unwrap()
}

/// Resolve the trigger image source to a concrete tensor of the given size.
pub fn resolve_trigger_image(src: &TriggerImage, h: usize, w: usize) -> Result<Tensor> {
    match src {
        TriggerImage::Procedural { seed } => Ok(procedural_trigger_image(*seed, h, w)),
        TriggerImage::Bfmt { path } => {
            let t = Tensor::load_bfmt(path)?;
            if t.shape() != [h, w] {
                return Err(CoreError::Shape(format!(
                    "trigger image {path} has shape {:?}, expected {h}x{w}",
                    t.shape()
                )));
            }
            Ok(t)
        }
    }
}

/// Blend the trigger's spectral amplitude into the image inside the
/// DC-centered low-frequency window of size floor(beta*H) x floor(beta*W):
/// `amp' = (1-alpha)*amp_image + alpha*amp_trigger`. The image keeps its own
/// phase everywhere; the result is inverse-transformed and clipped.
pub fn apply_fourier(image: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    let TriggerSpec::Fourier {
        alpha,
        beta,
        trigger_image,
    } = spec
    else {
        return Err(CoreError::Domain("apply_fourier needs a fourier spec".into()));
    };
    spec.validate()?;
    if image.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "apply_fourier expects an image, got shape {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let trigger = resolve_trigger_image(trigger_image, h, w)?;
    apply_fourier_with_trigger(image, *alpha as f64, *beta as f64, &trigger)
}

/// Bins touched by the amplitude blend, in the DC-at-origin layout.
///
/// The window is the DC-centered square of size floor(beta*H) x
/// floor(beta*W), closed under spectral mirroring (k -> -k) so the blended
/// spectrum stays conjugate-symmetric and the output image exactly real.
pub fn blend_mask(h: usize, w: usize, beta: f64) -> Vec<bool> {
    let wh = ((beta * h as f64).floor() as usize).max(1);
    let ww = ((beta * w as f64).floor() as usize).max(1);
    let r0 = (h - wh) / 2;
    let c0 = (w - ww) / 2;
    let mut mask = vec![false; h * w];
    for rs in r0..r0 + wh {
        for cs in c0..c0 + ww {
            let r = crate::fft::ifftshift_index(rs, h);
            let c = crate::fft::ifftshift_index(cs, w);
            mask[r * w + c] = true;
            mask[((h - r) % h) * w + (w - c) % w] = true;
        }
    }
    mask
}

/// Spectrum of the poisoned image before the inverse transform: image
/// amplitude blended with trigger amplitude inside [`blend_mask`], image
/// phase kept everywhere.
pub fn fourier_blend_spectrum(
    image: &Tensor,
    alpha: f64,
    beta: f64,
    trigger: &Tensor,
) -> Result<crate::fft::Spectrum> {
    if trigger.shape() != image.shape() {
        return Err(CoreError::Shape(format!(
            "trigger shape {:?} does not match image shape {:?}",
            trigger.shape(),
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut spec_img = fft2(image)?;
    let spec_trig = fft2(trigger)?;
    for (i, hit) in blend_mask(h, w, beta).into_iter().enumerate() {
        if hit {
            spec_img.amplitude[i] =
                (1.0 - alpha) * spec_img.amplitude[i] + alpha * spec_trig.amplitude[i];
        }
    }
    Ok(spec_img)
}

/// Same as [`apply_fourier`] with the trigger image already resolved, so
/// hot loops can reuse it.
pub fn apply_fourier_with_trigger(
    image: &Tensor,
    alpha: f64,
    beta: f64,
    trigger: &Tensor,
) -> Result<Tensor> {
    let spec = fourier_blend_spectrum(image, alpha, beta, trigger)?;
    let out = ifft2(&spec)?;
    let data: Vec<f32> = out.data().iter().map(|&v| v.clamp(0.0, 255.0)).collect();
    Tensor::new(out.shape().to_vec(), data)
}

/// Apply whichever trigger the spec describes.
pub fn apply_trigger(image: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    match spec {
        TriggerSpec::Patch { .. } => apply_patch(image, spec),
        TriggerSpec::Fourier { .. } => apply_fourier(image, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, DataConfig, Split};
    use crate::ops::psnr;

    fn test_image(seed: u64) -> Tensor {
        let cfg = DataConfig {
            classes: 2,
            train_per_class: 8,
            finetune_per_class: 8,
            test_per_class: 8,
            image_side: 64,
            seed,
        };
        gen_synthetic_dataset(&cfg, Split::Train).unwrap().samples[0]
            .image
            .clone()
    }

    #[test]
    fn patch_sets_exact_square() {
        let img = test_image(1);
        let spec = TriggerSpec::white_patch();
        let out = apply_patch(&img, &spec).unwrap();
        let mut changed = 0;
        let mut exact = 0;
        for r in 0..64 {
            for c in 0..64 {
                if out.at2(r, c) != img.at2(r, c) {
                    changed += 1;
                }
                if out.at2(r, c) == 245.0 && r >= 55 && (27..36).contains(&c) {
                    exact += 1;
                }
            }
        }
        assert_eq!(exact, 81);
        assert!(changed <= 81);
        // Pixel-diff oracle: total change confined to the patch region.
        let direct: f64 = (55..64)
            .flat_map(|r| (27..36).map(move |c| (r, c)))
            .map(|(r, c)| (245.0 - img.at2(r, c) as f64).abs())
            .sum();
        let total: f64 = (0..64)
            .flat_map(|r| (0..64).map(move |c| (r, c)))
            .map(|(r, c)| (out.at2(r, c) as f64 - img.at2(r, c) as f64).abs())
            .sum();
        assert!((direct - total).abs() < 1e-9);
    }

    #[test]
    fn patch_is_idempotent() {
        let img = test_image(2);
        let spec = TriggerSpec::black_patch();
        let once = apply_patch(&img, &spec).unwrap();
        let twice = apply_patch(&once, &spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn out_of_bounds_patch_rejected() {
        let img = test_image(3);
        let spec = TriggerSpec::Patch {
            value: 245.0,
            side: 9,
            anchor: PatchAnchor::Custom { row: 60, col: 60 },
        };
        assert!(matches!(
            apply_patch(&img, &spec),
            Err(CoreError::Domain(_))
        ));
        let oversized = TriggerSpec::Patch {
            value: 0.0,
            side: 65,
            anchor: PatchAnchor::BottomCenter,
        };
        assert!(apply_patch(&img, &oversized).is_err());
    }

    #[test]
    fn fourier_alpha_zero_is_identity() {
        let img = test_image(4);
        let spec = TriggerSpec::Fourier {
            alpha: 0.0,
            beta: 0.2,
            trigger_image: TriggerImage::default(),
        };
        let out = apply_fourier(&img, &spec).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-4, "max abs error {max_err}");
    }

    #[test]
    fn fourier_window_blend_matches_spectrum_diff_oracle() {
        // Spectrum-diff oracle: recompute the spectra of the clean and
        // poisoned images and compare bin by bin against the blend rule.
        let img = test_image(5);
        let spec = TriggerSpec::fourier_default();
        let out = apply_fourier(&img, &spec).unwrap();
        let trig = resolve_trigger_image(&TriggerImage::default(), 64, 64).unwrap();
        let sa = crate::fft::fft2(&img).unwrap();
        let st = crate::fft::fft2(&trig).unwrap();
        let sb = crate::fft::fft2(&out).unwrap();
        let mask = blend_mask(64, 64, 0.2);
        let mut worst_outside = 0.0f64;
        let mut worst_inside = 0.0f64;
        for i in 0..64 * 64 {
            if mask[i] {
                let expected = 0.8 * sa.amplitude[i] + 0.2 * st.amplitude[i];
                let rel = (sb.amplitude[i] - expected).abs() / (expected.abs() + 1.0);
                worst_inside = worst_inside.max(rel);
            } else {
                let rel =
                    (sb.amplitude[i] - sa.amplitude[i]).abs() / (sa.amplitude[i].abs() + 1.0);
                worst_outside = worst_outside.max(rel);
            }
        }
        assert!(
            worst_outside < 1e-4,
            "outside-window amplitude drift {worst_outside}"
        );
        assert!(
            worst_inside < 1e-4,
            "window bins deviate from blend rule by {worst_inside}"
        );
    }

    #[test]
    fn blend_mask_is_mirror_closed_and_centered() {
        let mask = blend_mask(64, 64, 0.2);
        for r in 0..64usize {
            for c in 0..64usize {
                let m = ((64 - r) % 64) * 64 + (64 - c) % 64;
                assert_eq!(mask[r * 64 + c], mask[m], "mask not mirror-closed");
            }
        }
        // DC sits inside the window, the high-frequency corner outside.
        assert!(mask[0]);
        let (r, c) = (fftshift_index(0, 64), fftshift_index(0, 64));
        assert!(mask[crate::fft::ifftshift_index(r, 64) * 64 + crate::fft::ifftshift_index(c, 64)]);
        assert!(!mask[32 * 64 + 32]);
    }

    #[test]
    fn fourier_default_preserves_visual_proximity() {
        let spec = TriggerSpec::fourier_default();
        for seed in 0..4 {
            let img = test_image(100 + seed);
            let out = apply_fourier(&img, &spec).unwrap();
            let db = psnr(&out, &img, 255.0).unwrap();
            assert!(db >= 25.0, "seed {seed}: PSNR {db} dB");
        }
    }

    #[test]
    fn triggers_are_pure() {
        let img = test_image(6);
        for spec in [TriggerSpec::white_patch(), TriggerSpec::fourier_default()] {
            let a = apply_trigger(&img, &spec).unwrap();
            let b = apply_trigger(&img, &spec).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let specs = [
            TriggerSpec::white_patch(),
            TriggerSpec::Patch {
                value: 10.0,
                side: 4,
                anchor: PatchAnchor::Custom { row: 3, col: 5 },
            },
            TriggerSpec::fourier_default(),
        ];
        for spec in specs {
            let json = serde_json::to_string(&spec).unwrap();
            let back: TriggerSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = Tensor::new(vec![32, 32], vec![0.0; 1024]).unwrap();
        let trig = Tensor::new(vec![64, 64], vec![0.0; 4096]).unwrap();
        assert!(apply_fourier_with_trigger(&img, 0.2, 0.2, &trig).is_err());
    }
}
