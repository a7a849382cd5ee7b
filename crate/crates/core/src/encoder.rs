//! Per-slice tokenizer: a small vision transformer that turns one 2D slice
//! into `L` patch tokens plus one slice-summary token.
//!
//! The built-in encoder cuts the slice into `s x s` patches, embeds them
//! linearly, adds a factorized (row + column) learned positional table,
//! prepends a learned class token and optional register tokens, runs a stack
//! of pre-norm blocks, and applies a final layer norm. The class-position
//! output becomes the slice token; register tokens participate in attention
//! but are never emitted. An adapter entry point accepts per-slice features
//! from an external pretrained encoder instead, projecting them to the
//! internal width when they differ.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::Deserialize;

use crate::blocks::{block_forward, init_block, Stoch, LN_EPS};
use crate::error::{MrnError, Result};
use crate::params::{Binder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSource {
    Builtin,
    /// Features come from an external encoder of the given channel width.
    Adapter { external_width: usize },
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// Patch edge length in pixels.
    pub patch_size: usize,
    /// Token channel width C.
    pub channel_dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub num_heads: usize,
    /// Register tokens participate in attention but are dropped from output.
    pub num_register_tokens: usize,
    pub drop_path_rate: f64,
    pub mlp_ratio: usize,
    pub source: EncoderSource,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(MrnError::Config("patch_size must be positive".into()));
        }
        if self.channel_dim % self.num_heads != 0 {
            return Err(MrnError::Config(format!(
                "channel_dim {} not divisible by num_heads {}",
                self.channel_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(MrnError::Config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if self.depth == 0 {
            return Err(MrnError::Config("encoder depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of encoding one slice: `L` patch tokens in row-major grid order
/// plus a slice token, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SliceTokens {
    /// `(L, C)` patch tokens.
    pub patch: Var,
    /// `(1, C)` slice token.
    pub slice_token: Var,
    /// `(grid_h, grid_w)` with `grid_h * grid_w == L`.
    pub grid: (usize, usize),
}

/// Register the built-in encoder's parameters. `max_grid` is the largest
/// `(grid_h, grid_w)` any configured region will request; the positional
/// tables are sized to it and sliced per slice shape.
pub fn init_encoder<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut rand_chacha::ChaCha12Rng,
    cfg: &EncoderConfig,
    max_grid: (usize, usize),
) {
    let c = cfg.channel_dim;
    let s = cfg.patch_size;
    params.insert_linear(rng, "enc.patch", s * s, c);
    params.insert_trunc_normal(rng, "enc.cls", &[1, c], 0.02);
    if cfg.num_register_tokens > 0 {
        params.insert_trunc_normal(rng, "enc.reg", &[cfg.num_register_tokens, c], 0.02);
    }
    params.insert_trunc_normal(rng, "enc.pos.row", &[max_grid.0, c], 0.02);
    params.insert_trunc_normal(rng, "enc.pos.col", &[max_grid.1, c], 0.02);
    for i in 0..cfg.depth {
        init_block(params, rng, &format!("enc.blk{i}"), c, c * cfg.mlp_ratio);
    }
    params.insert_layer_norm("enc.ln_f", c);
    if let EncoderSource::Adapter { external_width } = cfg.source {
        if external_width != c {
            params.insert_linear(rng, "enc.adapter", external_width, c);
        }
    }
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<()> {
    if tape.value(v).iter().any(|x| !x.is_finite()) {
        return Err(MrnError::Data("non-finite intensity in input slice".into()));
    }
    Ok(())
}

/// Run the transformer trunk over `[cls; registers; tokens]` and split the
/// outputs back apart. Shared by the built-in and adapter paths.
fn run_trunk<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    patch_tokens: Var,
    grid: (usize, usize),
    stoch: &mut Stoch<'_>,
) -> SliceTokens {
    let l = grid.0 * grid.1;
    let cls = binder.bind(tape, params, "enc.cls");
    let mut parts = vec![cls];
    if cfg.num_register_tokens > 0 {
        parts.push(binder.bind(tape, params, "enc.reg"));
    }
    parts.push(patch_tokens);
    let mut x = tape.concat_rows(&parts);
    for i in 0..cfg.depth {
        x = block_forward(tape, binder, params, &format!("enc.blk{i}"), x, cfg.num_heads, stoch);
    }
    let g = binder.bind(tape, params, "enc.ln_f.g");
    let b = binder.bind(tape, params, "enc.ln_f.b");
    let x = tape.layer_norm(x, g, b, LN_EPS);
    let lead = 1 + cfg.num_register_tokens;
    SliceTokens {
        patch: tape.slice_rows(x, lead, lead + l),
        slice_token: tape.slice_rows(x, 0, 1),
        grid,
    }
}

/// Encode one `(H, W)` slice already recorded on the tape.
pub fn encode_slice<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    slice: Var,
    stoch: &mut Stoch<'_>,
) -> Result<SliceTokens> {
    let shape = tape.shape(slice).to_vec();
    if shape.len() != 2 {
        return Err(MrnError::Shape(format!("encode_slice expects (H, W), got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let s = cfg.patch_size;
    if h % s != 0 || w % s != 0 {
        return Err(MrnError::Config(format!(
            "slice {h}x{w} not divisible by patch size {s}"
        )));
    }
    check_finite(tape, slice)?;
    let grid = (h / s, w / s);

    let row_table = binder.bind(tape, params, "enc.pos.row");
    let col_table = binder.bind(tape, params, "enc.pos.col");
    let (cap_h, cap_w) = (tape.shape(row_table)[0], tape.shape(col_table)[0]);
    if grid.0 > cap_h || grid.1 > cap_w {
        return Err(MrnError::Config(format!(
            "patch grid {:?} exceeds positional table capacity ({cap_h}, {cap_w})",
            grid
        )));
    }

    let patches = tape.patchify(slice, s);
    let w_embed = binder.bind(tape, params, "enc.patch.w");
    let b_embed = binder.bind(tape, params, "enc.patch.b");
    let embedded = tape.matmul(patches, w_embed);
    let embedded = tape.add_rowvec(embedded, b_embed);

    let rows = tape.slice_rows(row_table, 0, grid.0);
    let cols = tape.slice_rows(col_table, 0, grid.1);
    let pos = tape.grid_positions(rows, cols);
    let tokens = tape.add(embedded, pos);

    Ok(run_trunk(tape, binder, params, cfg, tokens, grid, stoch))
}

/// Encode every slice of a volume independently (no cross-slice flow here).
pub fn encode_volume<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    slices: &[Var],
    stoch: &mut Stoch<'_>,
) -> Result<Vec<SliceTokens>> {
    if slices.is_empty() {
        return Err(MrnError::Data("encode_volume: empty volume".into()));
    }
    slices
        .iter()
        .map(|s| encode_slice(tape, binder, params, cfg, *s, stoch))
        .collect()
}

/// Record a `(D, H, W)` volume on the tape as one constant per slice.
pub fn record_volume<T: Scalar>(tape: &mut Tape<T>, volume: &Array3<T>) -> Vec<Var> {
    (0..volume.dim().0)
        .map(|i| tape.constant(volume.index_axis(Axis(0), i).to_owned().into_dyn()))
        .collect()
}

// ---- external-feature adapter ----------------------------------------------

/// Features for one slice produced by an external encoder.
#[derive(Clone, Debug)]
pub struct ExternalSliceFeatures<T: Scalar> {
    /// `(L', C')` per-patch embeddings, row-major grid order.
    pub patch: Array2<T>,
    /// Class-token embedding; required.
    pub class_token: Option<Array1<T>>,
    pub grid: (usize, usize),
}

/// Map external features into [`SliceTokens`]: identity when the widths
/// already agree, a trainable linear projection otherwise.
pub fn adapt_external<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    ext: &ExternalSliceFeatures<T>,
    expected_grid: (usize, usize),
) -> Result<SliceTokens> {
    let EncoderSource::Adapter { external_width } = cfg.source else {
        return Err(MrnError::Config(
            "adapt_external requires an adapter-sourced encoder config".into(),
        ));
    };
    if ext.grid != expected_grid {
        return Err(MrnError::Data(format!(
            "adapter: feature grid {:?} does not match declared patch grid {:?}",
            ext.grid, expected_grid
        )));
    }
    if ext.patch.nrows() != ext.grid.0 * ext.grid.1 {
        return Err(MrnError::Data(format!(
            "adapter: {} patch rows inconsistent with grid {:?}",
            ext.patch.nrows(),
            ext.grid
        )));
    }
    let Some(class_token) = &ext.class_token else {
        return Err(MrnError::Data("adapter: external features lack a class token".into()));
    };
    if ext.patch.ncols() != external_width || class_token.len() != external_width {
        return Err(MrnError::Data(format!(
            "adapter: feature width {} does not match configured external width {external_width}",
            ext.patch.ncols()
        )));
    }

    let patch = tape.constant(ext.patch.clone().into_dyn());
    let cls = tape.constant(
        class_token.clone().insert_axis(Axis(0)).into_dyn(),
    );
    if external_width == cfg.channel_dim {
        return Ok(SliceTokens { patch, slice_token: cls, grid: ext.grid });
    }
    let w = binder.bind(tape, params, "enc.adapter.w");
    let b = binder.bind(tape, params, "enc.adapter.b");
    let project = |tape: &mut Tape<T>, x: Var, w: Var, b: Var| {
        let y = tape.matmul(x, w);
        tape.add_rowvec(y, b)
    };
    Ok(SliceTokens {
        patch: project(tape, patch, w, b),
        slice_token: project(tape, cls, w, b),
        grid: ext.grid,
    })
}

#[derive(Deserialize)]
struct FeatureSidecar {
    grid_h: usize,
    grid_w: usize,
    channels: usize,
}

/// Load per-slice external features from a directory: `slice_000.f32`
/// (little-endian float32, class-token row first, then `L` patch rows) next
/// to `slice_000.json` giving `{grid_h, grid_w, channels}`.
pub fn load_external_features(dir: &Path, depth: usize) -> Result<Vec<ExternalSliceFeatures<f32>>> {
    let mut out = Vec::with_capacity(depth);
    for i in 0..depth {
        let data_path = dir.join(format!("slice_{i:03}.f32"));
        let meta_path = dir.join(format!("slice_{i:03}.json"));
        let meta_bytes = std::fs::read(&meta_path).map_err(|e| MrnError::io(&meta_path, e))?;
        let side: FeatureSidecar = serde_json::from_slice(&meta_bytes)
            .map_err(|e| MrnError::Data(format!("{}: {e}", meta_path.display())))?;
        let bytes = std::fs::read(&data_path).map_err(|e| MrnError::io(&data_path, e))?;
        let l = side.grid_h * side.grid_w;
        let expect = (l + 1) * side.channels * 4;
        if bytes.len() != expect {
            return Err(MrnError::Data(format!(
                "{}: {} bytes, expected {expect} for grid {}x{} with {} channels",
                data_path.display(),
                bytes.len(),
                side.grid_h,
                side.grid_w,
                side.channels
            )));
        }
        let mut values = Vec::with_capacity((l + 1) * side.channels);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        let class_token = Array1::from_vec(values[..side.channels].to_vec());
        let patch =
            Array2::from_shape_vec((l, side.channels), values[side.channels..].to_vec())
                .expect("sized above");
        out.push(ExternalSliceFeatures {
            patch,
            class_token: Some(class_token),
            grid: (side.grid_h, side.grid_w),
        });
    }
    Ok(out)
}
