//! Shared pre-norm transformer stack used by both trainable towers.
//!
//! Block: `x += Wo * MHA(LN1(x))`, then `x += FFN(LN2(x))` with a GELU
//! hidden layer of width `2d`; a final layer norm closes the stack.
//! Attention projections carry no biases (zero tokens stay exactly zero
//! through the attention path).

use rand_chacha::ChaCha8Rng;

use crate::params::{BoundVars, ParamStore};
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct TransformerStack {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl TransformerStack {
    pub fn ffn_hidden(&self) -> usize {
        2 * self.d
    }

    /// Register all stack parameters under `prefix`.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
        let d = self.d;
        for l in 0..self.n_layers {
            let p = format!("{prefix}.l{l}");
            store.insert_const(format!("{p}.ln1.g"), 1, d, 1.0);
            store.insert_const(format!("{p}.ln1.b"), 1, d, 0.0);
            store.insert_fan_in(format!("{p}.wq"), d, d, rng);
            store.insert_fan_in(format!("{p}.wk"), d, d, rng);
            store.insert_fan_in(format!("{p}.wv"), d, d, rng);
            store.insert_fan_in(format!("{p}.wo"), d, d, rng);
            store.insert_const(format!("{p}.ln2.g"), 1, d, 1.0);
            store.insert_const(format!("{p}.ln2.b"), 1, d, 0.0);
            store.insert_fan_in(format!("{p}.ffn.w1"), d, self.ffn_hidden(), rng);
            store.insert_const(format!("{p}.ffn.b1"), 1, self.ffn_hidden(), 0.0);
            store.insert_fan_in(format!("{p}.ffn.w2"), self.ffn_hidden(), d, rng);
            store.insert_const(format!("{p}.ffn.b2"), 1, d, 0.0);
        }
        store.insert_const(format!("{prefix}.lnf.g"), 1, d, 1.0);
        store.insert_const(format!("{prefix}.lnf.b"), 1, d, 0.0);
    }

    /// Forward a stacked batch of token blocks: `x` is `(B * rows_per_block) x d`
    /// and self-attention runs within each block; everything row-wise
    /// (norms, FFN) is evaluated batched.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundVars,
        prefix: &str,
        mut x: Var,
        rows_per_block: usize,
    ) -> Var {
        let total = tape.value(x).nrows();
        assert!(rows_per_block >= 1 && total % rows_per_block == 0);
        let blocks = total / rows_per_block;
        for l in 0..self.n_layers {
            let p = format!("{prefix}.l{l}");
            let ln1 = tape.layer_norm(
                x,
                bound.var(&format!("{p}.ln1.g")),
                bound.var(&format!("{p}.ln1.b")),
                LN_EPS,
            );
            let q = tape.matmul(ln1, bound.var(&format!("{p}.wq")));
            let k = tape.matmul(ln1, bound.var(&format!("{p}.wk")));
            let v = tape.matmul(ln1, bound.var(&format!("{p}.wv")));
            let attn = if blocks == 1 {
                tape.mha(q, k, v, self.n_heads)
            } else {
                let parts: Vec<Var> = (0..blocks)
                    .map(|b| {
                        let qb = tape.rows(q, b * rows_per_block, rows_per_block);
                        let kb = tape.rows(k, b * rows_per_block, rows_per_block);
                        let vb = tape.rows(v, b * rows_per_block, rows_per_block);
                        tape.mha(qb, kb, vb, self.n_heads)
                    })
                    .collect();
                tape.concat_rows(&parts)
            };
            let proj = tape.matmul(attn, bound.var(&format!("{p}.wo")));
            x = tape.add(x, proj);

            let ln2 = tape.layer_norm(
                x,
                bound.var(&format!("{p}.ln2.g")),
                bound.var(&format!("{p}.ln2.b")),
                LN_EPS,
            );
            let h1 = tape.matmul(ln2, bound.var(&format!("{p}.ffn.w1")));
            let h1b = tape.add_row(h1, bound.var(&format!("{p}.ffn.b1")));
            let act = tape.gelu(h1b);
            let h2 = tape.matmul(act, bound.var(&format!("{p}.ffn.w2")));
            let h2b = tape.add_row(h2, bound.var(&format!("{p}.ffn.b2")));
            x = tape.add(x, h2b);
        }
        tape.layer_norm(
            x,
            bound.var(&format!("{prefix}.lnf.g")),
            bound.var(&format!("{prefix}.lnf.b")),
            LN_EPS,
        )
    }
}
