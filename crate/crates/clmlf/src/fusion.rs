//! The multi-layer fusion stack: image-token projection, image transformer,
//! text-image fusion transformer, and attention pooling down to the single
//! multimodal vector all three training objectives consume.

use crate::autodiff::{Tape, Var};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{init_encoder_stack, init_linear, Forward, INIT_STD};
use crate::params::{trunc_normal, zeros, ParamStore};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

fn default_fusion_layers() -> usize {
    3
}
fn default_image_layers() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MLFConfig {
    /// Text-image fusion transformer depth (1..=6; default 3).
    #[serde(default = "default_fusion_layers")]
    pub fusion_layers: usize,
    /// Image transformer depth (1..=3; default 2).
    #[serde(default = "default_image_layers")]
    pub image_layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Pool hidden width; defaults to `d_t` when zero.
    #[serde(default)]
    pub d_h: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl MLFConfig {
    pub fn validate(&self, d_t: usize) -> Result<()> {
        if !(1..=6).contains(&self.fusion_layers) {
            return Err(Error::Config(format!(
                "fusion_layers {} outside [1,6]",
                self.fusion_layers
            )));
        }
        if !(1..=3).contains(&self.image_layers) {
            return Err(Error::Config(format!(
                "image_layers {} outside [1,3]",
                self.image_layers
            )));
        }
        if self.heads == 0 || d_t % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_t {d_t} must be a positive multiple of fusion heads {}",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }

    pub fn pool_width(&self, d_t: usize) -> usize {
        if self.d_h == 0 {
            d_t
        } else {
            self.d_h
        }
    }
}

pub fn init_fusion<T: Scalar>(
    store: &mut ParamStore<T>,
    enc: &EncoderConfig,
    mlf: &MLFConfig,
    rng: &mut ChaCha20Rng,
) {
    init_linear(store, "fusion.proj.w", "fusion.proj.b", enc.d_i, enc.d_t, rng);
    store.insert(
        "fusion.img_pos",
        trunc_normal(&[enc.num_image_tokens(), enc.d_t], INIT_STD, rng),
    );
    init_encoder_stack(store, "fusion.ti", mlf.image_layers, enc.d_t, mlf.ff, rng);
    init_encoder_stack(store, "fusion.tm", mlf.fusion_layers, enc.d_t, mlf.ff, rng);
}

pub fn init_pool<T: Scalar>(
    store: &mut ParamStore<T>,
    d_t: usize,
    d_h: usize,
    rng: &mut ChaCha20Rng,
) {
    init_linear(store, "pool.w1", "pool.b1", d_t, d_h, rng);
    init_linear(store, "pool.w2", "pool.b2", d_h, 1, rng);
    init_linear(store, "pool.wr", "pool.br", d_t, d_t, rng);
}

/// Project the `[S, p, p, d_i]` feature map to image tokens: row-major
/// flatten of the grid, a linear map into the text width, then learned
/// positional embeddings. Output `[S, n_i, d_t]`.
pub fn project_image<T: Scalar>(
    fwd: &Forward<'_, T>,
    map: Var,
    enc: &EncoderConfig,
) -> Result<Var> {
    let tape = fwd.tape;
    let shape = tape.value(map).shape().to_vec();
    let [s, p0, p1, d_i] = shape[..] else {
        return Err(Error::Shape(format!(
            "expected [S,p,p,d_i] feature map, got {shape:?}"
        )));
    };
    if d_i != enc.d_i || p0 != p1 {
        return Err(Error::Shape(format!(
            "feature map {shape:?} does not match projection ({} -> {})",
            enc.d_i, enc.d_t
        )));
    }
    let n_i = p0 * p1;
    let flat = tape.reshape(map, &[s * n_i, d_i]);
    let projected = fwd.linear(flat, "fusion.proj.w", "fusion.proj.b");
    let tokens = tape.reshape(projected, &[s, n_i, enc.d_t]);
    Ok(tape.add_broadcast(tokens, fwd.param("fusion.img_pos")))
}

/// The image transformer stack over projected image tokens (no mask: every
/// image token is real).
pub fn image_transform<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    tokens: Var,
    mlf: &MLFConfig,
) -> (Var, Option<Var>) {
    fwd.encoder_stack("fusion.ti", mlf.image_layers, tokens, None, mlf.heads)
}

/// Output of the fusion stack: the fused token sequence, its combined mask
/// and the last fusion layer's attention probabilities `[S,h,n,n]`.
pub struct Fused {
    pub sequence: Var,
    pub mask: Array2<u8>,
    pub attention: Var,
}

/// Concatenate text then image tokens and run the fusion transformer.
/// Padded text positions stay masked out of every attention softmax; image
/// tokens are always live.
pub fn fuse<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    text: Var,
    image_tokens: Var,
    text_mask: &Array2<u8>,
    mlf: &MLFConfig,
) -> Result<Fused> {
    let tape = fwd.tape;
    let tshape = tape.value(text).shape().to_vec();
    let ishape = tape.value(image_tokens).shape().to_vec();
    if tshape[2] != ishape[2] {
        return Err(Error::Shape(format!(
            "text width {} != image token width {}",
            tshape[2], ishape[2]
        )));
    }
    let (s, n_t, n_i) = (tshape[0], tshape[1], ishape[1]);
    let mut mask = Array2::<u8>::ones((s, n_t + n_i));
    mask.slice_mut(ndarray::s![.., ..n_t]).assign(text_mask);
    let seq = tape.concat_tokens(text, image_tokens);
    let (seq, attention) =
        fwd.encoder_stack("fusion.tm", mlf.fusion_layers, seq, Some(&mask), mlf.heads);
    Ok(Fused {
        sequence: seq,
        mask,
        attention: attention.expect("fusion_layers >= 1"),
    })
}

/// Attention pooling: a two-layer scoring head, masked softmax over
/// positions, weighted sum, and a final projected GELU. Returns the pooled
/// `[S, d_t]` representation and the `[S, n]` pooling weights.
pub fn attention_pool<T: Scalar>(
    fwd: &Forward<'_, T>,
    sequence: Var,
    mask: &Array2<u8>,
) -> Result<(Var, Var)> {
    for (i, row) in mask.outer_iter().enumerate() {
        if row.iter().all(|&m| m == 0) {
            return Err(Error::InvalidInput(format!(
                "attention pool: row {i} is fully masked"
            )));
        }
    }
    let tape = fwd.tape;
    let shape = tape.value(sequence).shape().to_vec();
    let (s, n) = (shape[0], shape[1]);
    let hidden = tape.gelu(fwd.linear_tokens(sequence, "pool.w1", "pool.b1"));
    let scores = fwd.linear_tokens(hidden, "pool.w2", "pool.b2");
    let scores = tape.reshape(scores, &[s, n]);
    let weights = tape.softmax_masked(scores, Some(mask));
    let pooled = tape.weighted_sum(sequence, weights);
    let rep = tape.gelu(fwd.linear(pooled, "pool.wr", "pool.br"));
    Ok((rep, weights))
}
