//! Trainable toy encoders producing the text hidden sequence and the image
//! feature map, plus the adapter contract for swapping in pretrained
//! backbones of matching shape.

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{init_encoder_stack, init_linear, Forward, INIT_STD};
use crate::params::{trunc_normal, ParamStore};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_t: usize,
    pub max_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub d_i: usize,
    pub conv_blocks: usize,
    pub image_size: (usize, usize),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 || self.text_heads == 0 || self.d_t % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "d_t {} must be a positive multiple of text_heads {}",
                self.d_t, self.text_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.d_i == 0 || self.conv_blocks == 0 {
            return Err(Error::Config("d_i and conv_blocks must be positive".into()));
        }
        let (h, w) = self.image_size;
        if h != w {
            return Err(Error::Config(format!(
                "image must be square, got {h}x{w}"
            )));
        }
        conv_grid_side(h, self.conv_blocks)?;
        Ok(())
    }

    /// Feature-map side length after the conv stack.
    pub fn grid_side(&self) -> usize {
        conv_grid_side(self.image_size.0, self.conv_blocks).expect("validated config")
    }

    pub fn num_image_tokens(&self) -> usize {
        let p = self.grid_side();
        p * p
    }
}

/// Side length of the feature map produced by `blocks` stride-2 stages on a
/// `side`-pixel input; errors when the downsampling does not divide evenly.
pub fn conv_grid_side(side: usize, blocks: usize) -> Result<usize> {
    let stride = 1usize << blocks;
    if side == 0 || side % stride != 0 {
        return Err(Error::Config(format!(
            "image side {side} is not divisible by total stride {stride}"
        )));
    }
    Ok(side / stride)
}

/// Anything that can stand in for the text encoder: the contract is just
/// the `[S, n_t, d_t]` hidden sequence, so a pretrained-backbone adapter
/// plugs in by emitting the same shape.
pub trait TextFeatureSource<T: Scalar> {
    fn text_hidden(&self, batch: &Batch<T>) -> Result<Array3<T>>;
    fn width(&self) -> usize;
}

/// Image-side analogue: emit a `[S, p, p, d_i]` feature map.
pub trait ImageFeatureSource<T: Scalar> {
    fn image_map(&self, batch: &Batch<T>) -> Result<Array4<T>>;
    fn grid_side(&self) -> usize;
    fn feature_dim(&self) -> usize;
}

pub fn init_text_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    rng: &mut ChaCha20Rng,
) {
    store.insert(
        "text.tok_emb",
        trunc_normal(&[cfg.vocab_size, cfg.d_t], INIT_STD, rng),
    );
    store.insert(
        "text.pos_emb",
        trunc_normal(&[cfg.max_len, cfg.d_t], INIT_STD, rng),
    );
    init_encoder_stack(store, "text", cfg.text_layers, cfg.d_t, cfg.text_ff, rng);
}

pub fn init_image_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    rng: &mut ChaCha20Rng,
) {
    let mut c_in = 3;
    for j in 0..cfg.conv_blocks {
        store.insert(
            &format!("img.conv{j}.w"),
            trunc_normal(&[cfg.d_i, c_in, 3, 3], INIT_STD, rng),
        );
        store.insert(&format!("img.conv{j}.b"), crate::params::zeros(&[cfg.d_i]));
        c_in = cfg.d_i;
    }
}

/// Token + learned positional embeddings followed by the masked encoder
/// stack; with zero layers the output is exactly embeddings + positions.
/// Output shape `[S, n_t, d_t]`; padded positions never feed unpadded ones.
pub fn encode_text<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &EncoderConfig,
    batch: &Batch<T>,
) -> Result<Var> {
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    if batch.seq_len() != cfg.max_len {
        return Err(Error::Shape(format!(
            "batch seq len {} != configured max_len {}",
            batch.seq_len(),
            cfg.max_len
        )));
    }
    let tape = fwd.tape;
    let emb = tape.embedding(fwd.param("text.tok_emb"), &batch.token_ids);
    let x = tape.add_broadcast(emb, fwd.param("text.pos_emb"));
    let (x, _) = fwd.encoder_stack(
        "text",
        cfg.text_layers,
        x,
        Some(&batch.text_mask),
        cfg.text_heads,
    );
    Ok(x)
}

/// Stride-2 conv blocks with GELU, reshaped to the `[S, p, p, d_i]` feature
/// map layout.
pub fn encode_image<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &EncoderConfig,
    batch: &Batch<T>,
) -> Result<Var> {
    let tape = fwd.tape;
    let mut x = tape.leaf(batch.images.clone().into_dyn());
    for j in 0..cfg.conv_blocks {
        let conv = tape.conv3x3_s2(
            x,
            fwd.param(&format!("img.conv{j}.w")),
            fwd.param(&format!("img.conv{j}.b")),
        );
        x = tape.gelu(conv);
    }
    // [S, d_i, p, p] -> [S, p, p, d_i]
    Ok(tape.permute(x, &[0, 2, 3, 1]))
}
