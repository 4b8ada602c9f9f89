//! Transformer building blocks shared by the text encoder, the image
//! transformer and the text-image fusion stack.

use crate::autodiff::{Tape, Var};
use crate::params::{ones, trunc_normal, zeros, BoundParams, ParamStore};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand_chacha::ChaCha20Rng;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// One forward pass's working context: the tape, the parameter binding and
/// the dropout state. `dropout = 0` makes every pass deterministic.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub bound: &'a BoundParams,
    pub dropout: f64,
    pub rng: &'a mut ChaCha20Rng,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn param(&self, name: &str) -> Var {
        self.bound.var(self.store, name)
    }

    /// `x W + b` for `x: [m, d_in]`.
    pub fn linear(&self, x: Var, w: &str, b: &str) -> Var {
        let y = self.tape.matmul(x, self.param(w));
        self.tape.add_broadcast(y, self.param(b))
    }

    /// `x W + b` applied per token for `x: [S, n, d_in]`.
    pub fn linear_tokens(&self, x: Var, w: &str, b: &str) -> Var {
        let shape = self.tape.value(x).shape().to_vec();
        let (s, n, d_in) = (shape[0], shape[1], shape[2]);
        let d_out = self.tape.value(self.param(w)).shape()[1];
        let flat = self.tape.reshape(x, &[s * n, d_in]);
        let y = self.linear(flat, w, b);
        self.tape.reshape(y, &[s, n, d_out])
    }

    fn drop(&mut self, x: Var) -> Var {
        self.tape.dropout(x, self.dropout, self.rng)
    }

    /// Multi-head self-attention with an optional key mask `[S, n]`.
    /// Returns the projected output and the attention probabilities
    /// `[S, heads, n, n]`.
    pub fn self_attention(
        &mut self,
        prefix: &str,
        x: Var,
        mask: Option<&Array2<u8>>,
        heads: usize,
    ) -> (Var, Var) {
        let tape = self.tape;
        let shape = tape.value(x).shape().to_vec();
        let (s, n, d) = (shape[0], shape[1], shape[2]);
        assert!(d % heads == 0, "model width not divisible by heads");
        let dk = d / heads;

        let split = |this: &Self, v: Var| {
            let v = this.tape.reshape(v, &[s, n, heads, dk]);
            let v = this.tape.permute(v, &[0, 2, 1, 3]);
            this.tape.reshape(v, &[s * heads, n, dk])
        };
        let q = split(self, self.linear_tokens(x, &format!("{prefix}.wq"), &format!("{prefix}.bq")));
        let k = split(self, self.linear_tokens(x, &format!("{prefix}.wk"), &format!("{prefix}.bk")));
        let v = split(self, self.linear_tokens(x, &format!("{prefix}.wv"), &format!("{prefix}.bv")));

        let scores = tape.bmm_nt(q, k);
        let scores = tape.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
        let scores = tape.reshape(scores, &[s, heads, n, n]);
        let probs = tape.softmax_masked(scores, mask);
        let ctx = tape.bmm(tape.reshape(probs, &[s * heads, n, n]), v);
        let ctx = tape.reshape(ctx, &[s, heads, n, dk]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, &[s, n, d]);
        let out = self.linear_tokens(ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"));
        (out, probs)
    }

    /// Post-norm encoder layer: self-attention and feed-forward sublayers,
    /// each wrapped in residual + layer norm.
    pub fn encoder_layer(
        &mut self,
        prefix: &str,
        x: Var,
        mask: Option<&Array2<u8>>,
        heads: usize,
    ) -> (Var, Var) {
        let tape = self.tape;
        let (attn_out, probs) = self.self_attention(&format!("{prefix}.attn"), x, mask, heads);
        let attn_out = self.drop(attn_out);
        let x = tape.layer_norm(
            tape.add(x, attn_out),
            self.param(&format!("{prefix}.ln1.g")),
            self.param(&format!("{prefix}.ln1.b")),
            LN_EPS,
        );
        let h = self.linear_tokens(x, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"));
        let h = tape.gelu(h);
        let h = self.linear_tokens(h, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"));
        let h = self.drop(h);
        let x = tape.layer_norm(
            tape.add(x, h),
            self.param(&format!("{prefix}.ln2.g")),
            self.param(&format!("{prefix}.ln2.b")),
            LN_EPS,
        );
        (x, probs)
    }

    /// A stack of encoder layers named `{prefix}.l{i}`. Returns the output
    /// and the last layer's attention probabilities (`None` for zero
    /// layers).
    pub fn encoder_stack(
        &mut self,
        prefix: &str,
        layers: usize,
        x: Var,
        mask: Option<&Array2<u8>>,
        heads: usize,
    ) -> (Var, Option<Var>) {
        let mut x = x;
        let mut last = None;
        for i in 0..layers {
            let (y, probs) = self.encoder_layer(&format!("{prefix}.l{i}"), x, mask, heads);
            x = y;
            last = Some(probs);
        }
        (x, last)
    }
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    w: &str,
    b: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha20Rng,
) {
    store.insert(w, trunc_normal(&[d_in, d_out], INIT_STD, rng));
    store.insert(b, zeros(&[d_out]));
}

pub fn init_encoder_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    ff: usize,
    rng: &mut ChaCha20Rng,
) {
    for name in ["wq", "wk", "wv", "wo"] {
        let bias = format!("{prefix}.attn.b{}", &name[1..]);
        init_linear(store, &format!("{prefix}.attn.{name}"), &bias, d, d, rng);
    }
    store.insert(&format!("{prefix}.ln1.g"), ones(&[d]));
    store.insert(&format!("{prefix}.ln1.b"), zeros(&[d]));
    init_linear(
        store,
        &format!("{prefix}.ffn.w1"),
        &format!("{prefix}.ffn.b1"),
        d,
        ff,
        rng,
    );
    init_linear(
        store,
        &format!("{prefix}.ffn.w2"),
        &format!("{prefix}.ffn.b2"),
        ff,
        d,
        rng,
    );
    store.insert(&format!("{prefix}.ln2.g"), ones(&[d]));
    store.insert(&format!("{prefix}.ln2.b"), zeros(&[d]));
}

pub fn init_encoder_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    layers: usize,
    d: usize,
    ff: usize,
    rng: &mut ChaCha20Rng,
) {
    for i in 0..layers {
        init_encoder_layer(store, &format!("{prefix}.l{i}"), d, ff, rng);
    }
}
