//! Dense-prediction segmentation head.
//!
//! Four patch-token snapshots — the slice-encoder output plus intermediates
//! from the fused-attention stack — are unpatchified into spatial feature
//! maps, projected onto a resolution ladder, and fused deepest-first into
//! per-slice class logits at one-quarter of the region resolution. The
//! quarter-resolution maps are then upsampled to the full region size and
//! stacked along depth into a volumetric segmentation map.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

use crate::error::{MrnError, Result};
use crate::fusion::FfaTrace;
use crate::params::{Binder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Which snapshot fills the deepest decoder slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// All four slots come from global-attention snapshots (plus the encoder
    /// output in the shallowest slot).
    Global,
    /// Same as [`SelectionMode::Global`] except the deepest slot takes the
    /// local-attention snapshot of the last fused layer.
    Local,
}

#[derive(Clone, Debug)]
pub struct DptConfig {
    pub selection_mode: SelectionMode,
    /// Channel widths the four slots are projected to, shallow to deep.
    pub projection_channels: [usize; 4],
    /// Width of every refinement stage.
    pub fusion_channels: usize,
    /// Output classes, background included.
    pub num_classes: usize,
    /// Permit a two-layer trace: the slots become [encoder final, global 1,
    /// global 2, last], where "last" follows `selection_mode`. Off by
    /// default; traces shorter than three layers are otherwise rejected.
    pub allow_short_trace: bool,
    /// Diagnostic mode for linearity tests: biases are dropped and the
    /// rectifier is replaced by the identity, making the decoder linear.
    pub linear_mode: bool,
}

impl DptConfig {
    /// The standard decoder ladder: projection widths 96/192/384/768 and
    /// 256-channel fusion stages.
    pub fn standard(selection_mode: SelectionMode, num_classes: usize) -> Self {
        DptConfig {
            selection_mode,
            projection_channels: [96, 192, 384, 768],
            fusion_channels: 256,
            num_classes,
            allow_short_trace: false,
            linear_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MrnError::Config(format!(
                "segmentation needs at least background plus one class, got {}",
                self.num_classes
            )));
        }
        if self.projection_channels.iter().any(|&c| c == 0) || self.fusion_channels == 0 {
            return Err(MrnError::Config("decoder channel widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// Per-slice class logits, each `(K, H, W)`, stacked along depth.
pub struct SegMap {
    pub slices: Vec<Var>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl SegMap {
    pub fn depth(&self) -> usize {
        self.slices.len()
    }
}

/// Register decoder parameters: per slot a token projection, a 3x3 transfer
/// conv onto the fusion width, and a two-conv residual refinement unit; plus
/// the output head (3x3 conv and 1x1 class projection).
pub fn init_dpt<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha12Rng,
    cfg: &DptConfig,
    token_channels: usize,
) {
    let fc = cfg.fusion_channels;
    for (l, &cl) in cfg.projection_channels.iter().enumerate() {
        params.insert_linear(rng, &format!("dpt.proj{l}"), token_channels, cl);
        params.insert_conv(rng, &format!("dpt.rn{l}"), fc, cl, 3);
        params.insert_conv(rng, &format!("dpt.rcu{l}.c1"), fc, fc, 3);
        params.insert_conv(rng, &format!("dpt.rcu{l}.c2"), fc, fc, 3);
    }
    params.insert_conv(rng, "dpt.head.mid", fc, fc, 3);
    params.insert_conv(rng, "dpt.head.out", cfg.num_classes, fc, 1);
}

/// Pick the four token sets feeding the decoder, shallow to deep: the
/// encoder's final patch tokens, then global-attention snapshots of the last
/// three fused layers, with the deepest slot swapped for the local snapshot
/// in [`SelectionMode::Local`].
pub fn select_dpt_features(
    cfg: &DptConfig,
    trace: &FfaTrace,
    encoder_final: Var,
) -> Result<[Var; 4]> {
    let n = trace.num_layers();
    let deepest = |i: usize| match cfg.selection_mode {
        SelectionMode::Global => trace.globals[i],
        SelectionMode::Local => trace.locals[i],
    };
    if n >= 3 {
        Ok([encoder_final, trace.globals[n - 3], trace.globals[n - 2], deepest(n - 1)])
    } else if n == 2 && cfg.allow_short_trace {
        Ok([encoder_final, trace.globals[0], trace.globals[1], deepest(1)])
    } else {
        Err(MrnError::Config(format!(
            "feature selection needs at least 3 fused layers, got {n} \
             (two-layer traces need allow_short_trace)"
        )))
    }
}

/// Reshape `(L, C)` patch tokens of one slice into row-major `(h, w)` grid
/// order and project the channels: output `(c_l, h, w)`.
pub fn unpatchify<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    proj: &str,
    tokens: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let (h, w) = grid;
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(MrnError::Shape(format!(
            "unpatchify expects {h}x{w}={} token rows, got shape {shape:?}",
            h * w
        )));
    }
    let wv = binder.bind(tape, params, &format!("{proj}.w"));
    let bv = binder.bind(tape, params, &format!("{proj}.b"));
    let p = tape.matmul(tokens, wv);
    let p = tape.add_rowvec(p, bv);
    Ok(tape.tokens_to_image(p, h, w))
}

fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    linear: bool,
) -> Var {
    let w = binder.bind(tape, params, &format!("{prefix}.w"));
    let b = if linear {
        let cout = tape.shape(w)[0];
        tape.constant(ArrayD::zeros(IxDyn(&[cout])))
    } else {
        binder.bind(tape, params, &format!("{prefix}.b"))
    };
    tape.conv2d(x, w, b)
}

fn rectify<T: Scalar>(tape: &mut Tape<T>, x: Var, linear: bool) -> Var {
    if linear {
        x
    } else {
        tape.relu(x)
    }
}

/// Residual refinement unit: two rectified 3x3 convolutions at the fusion
/// width, added back onto the input.
fn refine<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    linear: bool,
) -> Var {
    let y = rectify(tape, x, linear);
    let y = conv(tape, binder, params, &format!("{prefix}.c1"), y, linear);
    let y = rectify(tape, y, linear);
    let y = conv(tape, binder, params, &format!("{prefix}.c2"), y, linear);
    tape.add(x, y)
}

/// Fuse four per-slice feature maps (shallow to deep, all on the token grid)
/// into `(K, H/4, W/4)` class logits for one slice.
///
/// Each map is resampled onto the ladder x4 / x2 / x1 / x0.5 of the token
/// grid, transferred to the fusion width, and refined; the cascade then
/// walks deepest-first, upsampling by two and summing with the next
/// shallower refined map. The head rectifies once more, snaps to exactly
/// one-quarter of the region size, and projects to class channels.
pub fn dpt_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &DptConfig,
    maps: &[Var; 4],
    region_hw: (usize, usize),
) -> Result<Var> {
    let (ih, iw) = region_hw;
    if ih % 4 != 0 || iw % 4 != 0 {
        return Err(MrnError::Config(format!(
            "region dims must be divisible by 4, got {ih}x{iw}"
        )));
    }
    let s0 = tape.shape(maps[0]).to_vec();
    if s0.len() != 3 {
        return Err(MrnError::Shape(format!("fusion maps must be (c,h,w), got {s0:?}")));
    }
    let (h, w) = (s0[1], s0[2]);
    for (l, &m) in maps.iter().enumerate() {
        let s = tape.shape(m);
        if s.len() != 3 || s[0] != cfg.projection_channels[l] {
            return Err(MrnError::Shape(format!(
                "fusion map {l} must have {} channels, got shape {s:?}",
                cfg.projection_channels[l]
            )));
        }
        if s[1] != h || s[2] != w {
            return Err(MrnError::Shape(format!(
                "fusion maps disagree on the token grid: {h}x{w} vs {}x{}",
                s[1], s[2]
            )));
        }
    }
    let linear = cfg.linear_mode;
    let sizes = [
        (4 * h, 4 * w),
        (2 * h, 2 * w),
        (h, w),
        (h.div_ceil(2), w.div_ceil(2)),
    ];
    let mut refined = Vec::with_capacity(4);
    for l in 0..4 {
        let m = if sizes[l] == (h, w) {
            maps[l]
        } else {
            tape.resize_bilinear(maps[l], sizes[l].0, sizes[l].1)
        };
        let m = conv(tape, binder, params, &format!("dpt.rn{l}"), m, linear);
        refined.push(refine(tape, binder, params, &format!("dpt.rcu{l}"), m, linear));
    }
    let mut x = refined[3];
    for l in (0..3).rev() {
        let up = tape.resize_bilinear(x, sizes[l].0, sizes[l].1);
        x = tape.add(up, refined[l]);
    }
    let y = conv(tape, binder, params, "dpt.head.mid", x, linear);
    let y = rectify(tape, y, linear);
    let (qh, qw) = (ih / 4, iw / 4);
    let y = if (sizes[0].0, sizes[0].1) == (qh, qw) {
        y
    } else {
        tape.resize_bilinear(y, qh, qw)
    };
    Ok(conv(tape, binder, params, "dpt.head.out", y, linear))
}

/// Decode every slice of the trace independently and stack the full-size
/// logits along depth.
pub fn segment_volume<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &DptConfig,
    trace: &FfaTrace,
    encoder_final: Var,
    depth: usize,
    grid: (usize, usize),
    region_hw: (usize, usize),
) -> Result<SegMap> {
    cfg.validate()?;
    let slots = select_dpt_features(cfg, trace, encoder_final)?;
    let ell = grid.0 * grid.1;
    for &slot in &slots {
        let s = tape.shape(slot);
        if s.len() != 2 || s[0] != depth * ell {
            return Err(MrnError::Shape(format!(
                "token set must hold {depth}x{ell} rows, got shape {s:?}"
            )));
        }
    }
    let (ih, iw) = region_hw;
    let mut slices = Vec::with_capacity(depth);
    for i in 0..depth {
        let mut maps = [slots[0]; 4];
        for (l, &slot) in slots.iter().enumerate() {
            let rows = tape.slice_rows(slot, i * ell, (i + 1) * ell);
            maps[l] = unpatchify(tape, binder, params, &format!("dpt.proj{l}"), rows, grid)?;
        }
        let quarter = dpt_fuse(tape, binder, params, cfg, &maps, region_hw)?;
        slices.push(tape.resize_bilinear(quarter, ih, iw));
    }
    Ok(SegMap { slices, classes: cfg.num_classes, height: ih, width: iw })
}

/// Collect a segmentation map's logits into a `(D, K, H, W)` array.
pub fn segmap_values<T: Scalar>(tape: &Tape<T>, map: &SegMap) -> Array4<T> {
    let mut out = Array4::zeros((map.depth(), map.classes, map.height, map.width));
    for (i, &v) in map.slices.iter().enumerate() {
        let val = tape
            .value(v)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("segmentation slice is rank-3");
        out.index_axis_mut(ndarray::Axis(0), i).assign(&val);
    }
    out
}

/// Per-voxel argmax over the class axis.
pub fn argmax_labels<T: Scalar>(logits: &Array4<T>) -> Array3<u8> {
    let (d, k, h, w) = logits.dim();
    Array3::from_shape_fn((d, h, w), |(i, r, c)| {
        let mut best = 0usize;
        for cls in 1..k {
            if logits[(i, cls, r, c)] > logits[(i, best, r, c)] {
                best = cls;
            }
        }
        best as u8
    })
}

/// Write logits as little-endian f32 in (depth, class, row, col) order, with
/// a JSON sidecar `{depth, classes, height, width}` next to it.
pub fn write_segmap(path: &Path, logits: &Array4<f32>) -> Result<()> {
    let (d, k, h, w) = logits.dim();
    let mut bytes = Vec::with_capacity(logits.len() * 4);
    for &v in logits.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| MrnError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| MrnError::io(path, e))?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::json!({
        "depth": d,
        "classes": k,
        "height": h,
        "width": w,
    });
    std::fs::write(&sidecar, format!("{meta:#}\n")).map_err(|e| MrnError::io(&sidecar, e))?;
    Ok(())
}
