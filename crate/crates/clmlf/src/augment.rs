//! Text and image augmentation for the data-based contrastive objective:
//! pluggable back-translation plus a search-free image policy that samples
//! transforms uniformly from a fixed set.

use crate::data::{decode_image_01, standardize_image, tokenize_to_ids, Batch, Example, Vocab};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

const BUNDLED_SYNONYMS: &str = include_str!("../assets/synonyms.txt");

/// Deterministic paraphrase stub: seeded synonym substitution over a
/// two-column table plus word dropout that never empties the text.
#[derive(Debug, Clone)]
pub struct StubAugmenter {
    table: HashMap<String, Vec<String>>,
    dropout: f64,
}

impl StubAugmenter {
    pub fn bundled() -> Self {
        Self::from_table_str(BUNDLED_SYNONYMS, 0.1)
    }

    pub fn from_table_str(table: &str, dropout: f64) -> Self {
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for line in table.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            if let (Some(word), Some(syn)) = (cols.next(), cols.next()) {
                map.entry(word.to_string()).or_default().push(syn.to_string());
            }
        }
        StubAugmenter {
            table: map,
            dropout,
        }
    }

    pub fn from_table_file(path: impl AsRef<Path>, dropout: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_table_str(&text, dropout))
    }
}

/// Round-trip machine-translation client: source -> pivot -> source over a
/// plain HTTP text-in/text-out endpoint.
#[derive(Debug, Clone)]
pub struct MtClient {
    pub endpoint: String,
    pub pivot: String,
    pub source: String,
    pub timeout: Duration,
}

impl MtClient {
    pub fn new(endpoint: &str, pivot: &str, timeout: Duration) -> Self {
        MtClient {
            endpoint: endpoint.to_string(),
            pivot: pivot.to_string(),
            source: "en".to_string(),
            timeout,
        }
    }

    fn translate(&self, text: &str, from: &str, to: &str) -> std::result::Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let payload = serde_json::json!({ "text": text, "source": from, "target": to });
        let mut response = agent
            .post(&self.endpoint)
            .send_json(&payload)
            .map_err(|e| e.to_string())?;
        let body: serde_json::Value = response.body_mut().read_json().map_err(|e| e.to_string())?;
        body.get("text")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| "response missing `text` field".to_string())
    }

    fn round_trip(&self, text: &str) -> std::result::Result<String, String> {
        let pivot_text = self.translate(text, &self.source, &self.pivot)?;
        self.translate(&pivot_text, &self.pivot, &self.source)
    }
}

#[derive(Debug, Clone)]
pub enum TextAugmenter {
    Identity,
    Stub(StubAugmenter),
    Mt(MtClient),
}

/// Result of one text augmentation. `fell_back` is set when an MT transport
/// failure forced the original text through unchanged; training never
/// aborts on augmentation failure.
#[derive(Debug, Clone)]
pub struct BackTranslation {
    pub text: String,
    pub fell_back: bool,
}

pub fn back_translate<R: Rng + ?Sized>(
    text: &str,
    aug: &TextAugmenter,
    rng: &mut R,
) -> BackTranslation {
    match aug {
        TextAugmenter::Identity => BackTranslation {
            text: text.to_string(),
            fell_back: false,
        },
        TextAugmenter::Stub(stub) => {
            let words: Vec<&str> = text.split_whitespace().collect();
            let mut out: Vec<String> = Vec::with_capacity(words.len());
            for word in &words {
                match stub.table.get(*word) {
                    Some(syns) => {
                        let pick = rng.random_range(0..syns.len());
                        out.push(syns[pick].clone());
                    }
                    None => out.push(word.to_string()),
                }
            }
            let mut kept: Vec<String> = Vec::with_capacity(out.len());
            let last = out.len().saturating_sub(1);
            for (i, word) in out.into_iter().enumerate() {
                let drop = rng.random::<f64>() < stub.dropout;
                if drop && !(i == last && kept.is_empty()) {
                    continue;
                }
                kept.push(word);
            }
            BackTranslation {
                text: kept.join(" "),
                fell_back: false,
            }
        }
        TextAugmenter::Mt(client) => match client.round_trip(text) {
            Ok(translated) if !translated.is_empty() => BackTranslation {
                text: translated,
                fell_back: false,
            },
            _ => BackTranslation {
                text: text.to_string(),
                fell_back: true,
            },
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageOp {
    Identity,
    Brightness,
    Contrast,
    Sharpness,
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Posterize,
    Solarize,
}

impl ImageOp {
    pub fn all() -> Vec<ImageOp> {
        use ImageOp::*;
        vec![
            Identity, Brightness, Contrast, Sharpness, Rotate, TranslateX, TranslateY, ShearX,
            ShearY, Posterize, Solarize,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ImageAugmentPolicy {
    n_ops: usize,
    magnitude: u8,
    op_set: Vec<ImageOp>,
}

impl ImageAugmentPolicy {
    pub fn new(n_ops: usize, magnitude: u8, op_set: Vec<ImageOp>) -> Result<Self> {
        if magnitude > 10 {
            return Err(Error::Config("magnitude must lie in [0,10]".into()));
        }
        if n_ops > 0 && op_set.is_empty() {
            return Err(Error::Config(
                "op_set must be non-empty when n_ops > 0".into(),
            ));
        }
        Ok(ImageAugmentPolicy {
            n_ops,
            magnitude,
            op_set,
        })
    }

    /// No-op policy.
    pub fn identity() -> Self {
        ImageAugmentPolicy {
            n_ops: 0,
            magnitude: 0,
            op_set: vec![ImageOp::Identity],
        }
    }

    pub fn n_ops(&self) -> usize {
        self.n_ops
    }

    pub fn magnitude(&self) -> u8 {
        self.magnitude
    }
}

/// Bilinear sample with clamped coordinates, i.e. edge replication outside
/// the frame.
fn sample_bilinear<T: Scalar>(img: &Array3<T>, c: usize, y: f64, x: f64) -> T {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v00 = img[[c, y0, x0]].as_f64();
    let v01 = img[[c, y0, x1]].as_f64();
    let v10 = img[[c, y1, x0]].as_f64();
    let v11 = img[[c, y1, x1]].as_f64();
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    T::from_f64(top * (1.0 - fy) + bot * fy)
}

/// Warp by the inverse coordinate map `src(y, x) = map(dst_y, dst_x)`.
fn warp<T: Scalar>(img: &Array3<T>, map: impl Fn(f64, f64) -> (f64, f64)) -> Array3<T> {
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::<T>::zeros((ch, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            for c in 0..ch {
                out[[c, y, x]] = sample_bilinear(img, c, sy, sx);
            }
        }
    }
    out
}

/// Apply one op at magnitude `m` with a pre-drawn `sign` (+1/-1; ignored by
/// sign-free ops). Inputs and outputs live in `[0,1]`.
pub fn apply_op<T: Scalar>(img: &Array3<T>, op: ImageOp, m: u8, sign: f64) -> Array3<T> {
    let strength = m as f64 / 10.0;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let out = match op {
        ImageOp::Identity => img.clone(),
        ImageOp::Brightness => {
            let factor = 1.0 + 0.9 * strength * sign;
            img.mapv(|v| T::from_f64(v.as_f64() * factor))
        }
        ImageOp::Contrast => {
            let factor = 1.0 + 0.9 * strength * sign;
            let mean = img.iter().fold(0.0, |acc, v| acc + v.as_f64()) / img.len() as f64;
            img.mapv(|v| T::from_f64((v.as_f64() - mean) * factor + mean))
        }
        ImageOp::Sharpness => {
            let factor = 1.0 + 0.9 * strength * sign;
            let blurred = smooth_3x3(img);
            let mut out = img.clone();
            ndarray::Zip::from(&mut out).and(&blurred).for_each(|o, &b| {
                let d = o.as_f64() - b.as_f64();
                *o = T::from_f64(b.as_f64() + factor * d);
            });
            out
        }
        ImageOp::Rotate => {
            let theta = (30.0 * strength * sign).to_radians();
            let (sin, cos) = theta.sin_cos();
            warp(img, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
            })
        }
        ImageOp::TranslateX => {
            let shift = 0.3 * w as f64 * strength * sign;
            warp(img, |y, x| (y, x - shift))
        }
        ImageOp::TranslateY => {
            let shift = 0.3 * h as f64 * strength * sign;
            warp(img, |y, x| (y - shift, x))
        }
        ImageOp::ShearX => {
            let s = 0.3 * strength * sign;
            warp(img, |y, x| (y, x - s * (y - cy)))
        }
        ImageOp::ShearY => {
            let s = 0.3 * strength * sign;
            warp(img, |y, x| (y - s * (x - cx), x))
        }
        ImageOp::Posterize => {
            let bits = (8.0 - 4.0 * strength).round().max(1.0) as u32;
            let mask = !(0xffu8 >> bits);
            img.mapv(|v| {
                let q = ((v.as_f64().clamp(0.0, 1.0) * 255.0) as u8) & mask;
                T::from_f64(q as f64 / 255.0)
            })
        }
        ImageOp::Solarize => {
            let threshold = 1.0 - strength;
            img.mapv(|v| {
                let f = v.as_f64();
                T::from_f64(if f >= threshold { 1.0 - f } else { f })
            })
        }
    };
    out.mapv(|v| T::from_f64(v.as_f64().clamp(0.0, 1.0)))
}

fn smooth_3x3<T: Scalar>(img: &Array3<T>) -> Array3<T> {
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::<T>::zeros((ch, h, w));
    // 3x3 kernel with a heavier center, edges replicated.
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let weight = if dy == 0 && dx == 0 { 5.0 } else { 1.0 };
                        acc += weight * img[[c, yy, xx]].as_f64();
                    }
                }
                out[[c, y, x]] = T::from_f64(acc / 13.0);
            }
        }
    }
    out
}

/// Apply `n_ops` transforms sampled uniformly with replacement from the
/// policy's op set. Pixels must be in `[0,1]` (pre-standardization); the
/// output is clipped back to `[0,1]`.
pub fn rand_augment<T: Scalar, R: Rng + ?Sized>(
    image: &Array3<T>,
    policy: &ImageAugmentPolicy,
    rng: &mut R,
) -> Array3<T> {
    let mut out = image.clone();
    for _ in 0..policy.n_ops {
        let op = policy.op_set[rng.random_range(0..policy.op_set.len())];
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        out = apply_op(&out, op, policy.magnitude, sign);
    }
    out
}

/// Build the augmented view of a batch: text augmented before tokenization,
/// images augmented before standardization, labels and order untouched.
/// `selection_rng` must start from the same state as the clean batch's
/// collate rng so multi-image picks coincide.
#[allow(clippy::too_many_arguments)]
pub fn augment_batch<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    examples: &[Example],
    text_aug: &TextAugmenter,
    policy: &ImageAugmentPolicy,
    vocab: &Vocab,
    max_len: usize,
    image_size: (usize, usize),
    selection_rng: &mut R1,
    aug_rng: &mut R2,
) -> Result<Batch<T>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot augment an empty batch".into()));
    }
    let s = examples.len();
    let (h, w) = image_size;
    let mut token_ids = Array2::<usize>::zeros((s, max_len));
    let mut text_mask = Array2::<u8>::zeros((s, max_len));
    let mut images = Array4::<T>::zeros((s, 3, h, w));
    let mut labels = Vec::with_capacity(s);
    for (i, ex) in examples.iter().enumerate() {
        let translated = back_translate(&ex.text, text_aug, aug_rng);
        let viewed = Example {
            text: translated.text,
            ..ex.clone()
        };
        let (ids, mask) = tokenize_to_ids(&viewed, vocab, max_len)?;
        for (j, (&id, &m)) in ids.iter().zip(mask.iter()).enumerate() {
            token_ids[[i, j]] = id;
            text_mask[[i, j]] = m;
        }
        let decoded = decode_image_01::<T, R1>(ex, image_size, selection_rng)?;
        let mut augmented = rand_augment(&decoded, policy, aug_rng);
        standardize_image(&mut augmented);
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&augmented.view());
        labels.push(ex.label);
    }
    Ok(Batch {
        token_ids,
        text_mask,
        images,
        labels,
    })
}
