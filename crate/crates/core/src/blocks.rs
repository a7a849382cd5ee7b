//! Pre-norm transformer blocks assembled from tape ops.
//!
//! One parameter family (`{prefix}.ln1/attn/ln2/mlp`) serves every use in the
//! model: encoder self-attention over one slice's tokens, the fusion stack's
//! global blocks over all slices' tokens, its local blocks applied per slice
//! with shared weights, and the slice-token stack that refines the region
//! token. Binding parameters through a [`Binder`] means repeated application
//! of the same block accumulates gradients automatically.

use rand_chacha::ChaCha12Rng;

use crate::params::{Binder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Stochastic-depth context for one forward pass. `Eval` (or a zero rate)
/// makes every block deterministic.
pub enum Stoch<'r> {
    Eval,
    Train { drop_path: f64, rng: &'r mut ChaCha12Rng },
}

impl Stoch<'_> {
    /// Re-borrow this context with a different drop-path rate, sharing the
    /// underlying RNG stream. Lets one forward pass apply per-module rates.
    pub fn with_rate(&mut self, rate: f64) -> Stoch<'_> {
        match self {
            Stoch::Eval => Stoch::Eval,
            Stoch::Train { rng, .. } => Stoch::Train {
                drop_path: rate,
                rng: &mut **rng,
            },
        }
    }

    /// Residual join `x + branch`, where training mode may drop the branch
    /// entirely (keeping the kept paths unbiased by `1/(1-rate)` scaling).
    fn residual<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, branch: Var) -> Var {
        match self {
            Stoch::Eval => tape.add(x, branch),
            Stoch::Train { drop_path, rng } => {
                if *drop_path == 0.0 {
                    return tape.add(x, branch);
                }
                if f64::sample_uniform(rng) < *drop_path {
                    x
                } else {
                    let scaled = tape.scale(branch, 1.0 / (1.0 - *drop_path));
                    tape.add(x, scaled)
                }
            }
        }
    }
}

/// Register parameters for one block: two layer norms, four attention
/// projections, and a two-layer MLP.
pub fn init_block(
    params: &mut ParamSet<impl Scalar>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    width: usize,
    mlp_hidden: usize,
) {
    params.insert_layer_norm(&format!("{prefix}.ln1"), width);
    for proj in ["wq", "wk", "wv", "wo"] {
        params.insert_linear(rng, &format!("{prefix}.attn.{proj}"), width, width);
    }
    params.insert_layer_norm(&format!("{prefix}.ln2"), width);
    params.insert_linear(rng, &format!("{prefix}.mlp.fc1"), width, mlp_hidden);
    params.insert_linear(rng, &format!("{prefix}.mlp.fc2"), mlp_hidden, width);
}

/// Multi-head self-attention over the rows of `x` (`(n, width)`).
pub fn attention_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Var {
    let width = tape.shape(x)[1];
    assert_eq!(width % heads, 0, "width {width} not divisible by heads {heads}");
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut project = |tape: &mut Tape<T>, name: &str| {
        let w = binder.bind(tape, params, &format!("{prefix}.{name}.w"));
        let b = binder.bind(tape, params, &format!("{prefix}.{name}.b"));
        let p = tape.matmul(x, w);
        tape.add_rowvec(p, b)
    };
    let q = project(tape, "wq");
    let k = project(tape, "wk");
    let v = project(tape, "wv");

    let mut merged = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        merged.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&merged);
    let wo = binder.bind(tape, params, &format!("{prefix}.wo.w"));
    let bo = binder.bind(tape, params, &format!("{prefix}.wo.b"));
    let out = tape.matmul(cat, wo);
    tape.add_rowvec(out, bo)
}

/// One pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    stoch: &mut Stoch<'_>,
) -> Var {
    let g1 = binder.bind(tape, params, &format!("{prefix}.ln1.g"));
    let b1 = binder.bind(tape, params, &format!("{prefix}.ln1.b"));
    let n1 = tape.layer_norm(x, g1, b1, LN_EPS);
    let attn = attention_forward(tape, binder, params, &format!("{prefix}.attn"), n1, heads);
    let x = stoch.residual(tape, x, attn);

    let g2 = binder.bind(tape, params, &format!("{prefix}.ln2.g"));
    let b2 = binder.bind(tape, params, &format!("{prefix}.ln2.b"));
    let n2 = tape.layer_norm(x, g2, b2, LN_EPS);
    let w1 = binder.bind(tape, params, &format!("{prefix}.mlp.fc1.w"));
    let bb1 = binder.bind(tape, params, &format!("{prefix}.mlp.fc1.b"));
    let h = tape.matmul(n2, w1);
    let h = tape.add_rowvec(h, bb1);
    let h = tape.gelu(h);
    let w2 = binder.bind(tape, params, &format!("{prefix}.mlp.fc2.w"));
    let bb2 = binder.bind(tape, params, &format!("{prefix}.mlp.fc2.b"));
    let h = tape.matmul(h, w2);
    let h = tape.add_rowvec(h, bb2);
    stoch.residual(tape, x, h)
}

/// Zero a block's attention and MLP output projections so the block becomes
/// the identity (used by tests; mirrors how deeper-layer contributions can be
/// disabled exactly in a residual architecture).
pub fn zero_output_projections(params: &mut ParamSet<impl Scalar>, prefix: &str) {
    for name in [
        format!("{prefix}.attn.wo.w"),
        format!("{prefix}.attn.wo.b"),
        format!("{prefix}.mlp.fc2.w"),
        format!("{prefix}.mlp.fc2.b"),
    ] {
        let t = params.get_mut(&name).unwrap_or_else(|| panic!("missing {name}"));
        t.fill(num_traits::Zero::zero());
    }
}
