//! The four-branch classifier.
//!
//! Paired NM/QSM volumes yield four regions of interest, each cropped around
//! its target nuclei, resized, and passed through one shared branch (slice
//! encoder, fused attention, region token, segmentation head). The four
//! region tokens concatenate in a fixed order into the patient
//! representation, which a two-layer head maps to diagnosis logits. Region
//! masking (zeroed intensities) supports the ablation harness.

use ndarray::{s, Array3};
use rand_chacha::ChaCha12Rng;

use crate::blocks::Stoch;
use crate::dpt::{init_dpt, segment_volume, DptConfig, SegMap};
use crate::encoder::{encode_volume, init_encoder, record_volume, EncoderConfig};
use crate::error::{MrnError, Result};
use crate::fusion::{
    add_slice_positions, ffa_stack, init_fusion, sfa_stack, token_field_from_slices,
    FusionConfig,
};
use crate::image_ops::{resize_volume_bilinear, resize_volume_nearest};
use crate::params::{Binder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const ROI_COUNT: usize = 4;

/// Canonical region order; the patient representation concatenates in this
/// order and branch identity is positional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoiName {
    Nm,
    Qsm1,
    Qsm2,
    Qsm3,
}

impl RoiName {
    pub const ALL: [RoiName; ROI_COUNT] = [RoiName::Nm, RoiName::Qsm1, RoiName::Qsm2, RoiName::Qsm3];

    pub fn index(self) -> usize {
        match self {
            RoiName::Nm => 0,
            RoiName::Qsm1 => 1,
            RoiName::Qsm2 => 2,
            RoiName::Qsm3 => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoiName::Nm => "nm",
            RoiName::Qsm1 => "qsm1",
            RoiName::Qsm2 => "qsm2",
            RoiName::Qsm3 => "qsm3",
        }
    }
}

impl std::fmt::Display for RoiName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Nm,
    Qsm,
}

/// Geometry and targeting of one region of interest.
#[derive(Clone, Debug)]
pub struct RoiSpec {
    pub name: RoiName,
    pub source_modality: Modality,
    /// Crop size in voxels, (depth, height, width).
    pub crop_dims: (usize, usize, usize),
    /// Raw label ids the crop centers on.
    pub nuclei: Vec<u8>,
    /// The longest in-plane side is resized to this many pixels.
    pub resize_longest: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl RoiSpec {
    /// Post-resize dims: the longest in-plane side becomes `resize_longest`,
    /// the short side scales by the same factor and is snapped to the
    /// nearest multiple of lcm(patch_size, 4) so the patch grid and the
    /// quarter-resolution decoder both divide evenly. Depth is unchanged.
    pub fn resized_dims(&self, patch_size: usize) -> Result<(usize, usize, usize)> {
        let (d, h, w) = self.crop_dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(MrnError::Config(format!(
                "region {} has empty crop dims {:?}",
                self.name, self.crop_dims
            )));
        }
        let unit = lcm(patch_size, 4);
        if self.resize_longest % unit != 0 || self.resize_longest == 0 {
            return Err(MrnError::Config(format!(
                "resize target {} for region {} is not a positive multiple of {unit}",
                self.resize_longest, self.name
            )));
        }
        let scale = self.resize_longest as f64 / h.max(w) as f64;
        let snap = |v: f64| ((v / unit as f64).round().max(1.0) as usize) * unit;
        let (oh, ow) = if h >= w {
            (self.resize_longest, snap(w as f64 * scale))
        } else {
            (snap(h as f64 * scale), self.resize_longest)
        };
        Ok((d, oh, ow))
    }
}

/// The four regions at production scale: one NM region over the
/// substantia-nigra pair and three QSM regions over basal-ganglia, midbrain,
/// and dentate nucleus pairs. Raw labels 1/2 mark the NM volume's nucleus
/// pair; the QSM volume uses 1/2, 3/4, 5/6 for its three pairs.
pub fn canonical_specs() -> [RoiSpec; ROI_COUNT] {
    [
        RoiSpec {
            name: RoiName::Nm,
            source_modality: Modality::Nm,
            crop_dims: (12, 32, 64),
            nuclei: vec![1, 2],
            resize_longest: 224,
        },
        RoiSpec {
            name: RoiName::Qsm1,
            source_modality: Modality::Qsm,
            crop_dims: (24, 128, 128),
            nuclei: vec![1, 2],
            resize_longest: 224,
        },
        RoiSpec {
            name: RoiName::Qsm2,
            source_modality: Modality::Qsm,
            crop_dims: (12, 64, 96),
            nuclei: vec![3, 4],
            resize_longest: 224,
        },
        RoiSpec {
            name: RoiName::Qsm3,
            source_modality: Modality::Qsm,
            crop_dims: (12, 48, 96),
            nuclei: vec![5, 6],
            resize_longest: 224,
        },
    ]
}

/// One cropped region: intensities plus the aligned nuclei label grid.
#[derive(Clone, Debug)]
pub struct RoiVolume<T: Scalar> {
    pub intensity: Array3<T>,
    pub labels: Array3<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Hc,
    Pd,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Hc, ClassLabel::Pd];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Hc => 0,
            ClassLabel::Pd => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ClassLabel::Hc),
            1 => Ok(ClassLabel::Pd),
            _ => Err(MrnError::Data(format!("class index {i} outside {{0, 1}}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Hc => "hc",
            ClassLabel::Pd => "pd",
        }
    }
}

/// One patient: the four regions in canonical order plus the diagnosis.
#[derive(Clone, Debug)]
pub struct PatientSample<T: Scalar> {
    pub id: String,
    pub label: ClassLabel,
    pub rois: [RoiVolume<T>; ROI_COUNT],
}

// ---- region preparation ------------------------------------------------------

/// Crop `spec.crop_dims` voxels centered on the bounding-box center of the
/// spec's target labels. The window stays centered; parts outside the volume
/// read as zeros. The label grid is cropped identically.
pub fn crop_roi<T: Scalar>(
    volume: &Array3<T>,
    labels: &Array3<u8>,
    spec: &RoiSpec,
) -> Result<RoiVolume<T>> {
    if volume.dim() != labels.dim() {
        return Err(MrnError::Shape(format!(
            "volume {:?} and labels {:?} disagree",
            volume.dim(),
            labels.dim()
        )));
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for ((z, y, x), &l) in labels.indexed_iter() {
        if spec.nuclei.contains(&l) {
            found = true;
            for (a, v) in [(0, z), (1, y), (2, x)] {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    if !found {
        return Err(MrnError::Data(format!(
            "target nuclei {:?} absent; cannot place region {}",
            spec.nuclei, spec.name
        )));
    }
    let dims = [spec.crop_dims.0, spec.crop_dims.1, spec.crop_dims.2];
    let vol_dims = [volume.dim().0, volume.dim().1, volume.dim().2];
    let mut start = [0isize; 3];
    for a in 0..3 {
        let center = (lo[a] + hi[a]) / 2;
        start[a] = center as isize - (dims[a] / 2) as isize;
    }
    let mut intensity = Array3::<T>::zeros((dims[0], dims[1], dims[2]));
    let mut out_labels = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    // Per-axis overlap of the window with the source volume.
    let mut src_lo = [0usize; 3];
    let mut src_hi = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    for a in 0..3 {
        src_lo[a] = start[a].max(0) as usize;
        src_hi[a] = (start[a] + dims[a] as isize).clamp(0, vol_dims[a] as isize) as usize;
        if src_hi[a] <= src_lo[a] {
            return Ok(RoiVolume { intensity, labels: out_labels });
        }
        dst_lo[a] = (src_lo[a] as isize - start[a]) as usize;
    }
    let len = [src_hi[0] - src_lo[0], src_hi[1] - src_lo[1], src_hi[2] - src_lo[2]];
    let src = s![src_lo[0]..src_hi[0], src_lo[1]..src_hi[1], src_lo[2]..src_hi[2]];
    let dst = s![
        dst_lo[0]..dst_lo[0] + len[0],
        dst_lo[1]..dst_lo[1] + len[1],
        dst_lo[2]..dst_lo[2] + len[2]
    ];
    intensity.slice_mut(dst).assign(&volume.slice(src));
    out_labels.slice_mut(dst).assign(&labels.slice(src));
    Ok(RoiVolume { intensity, labels: out_labels })
}

/// In-plane resize to the spec's target dims: bilinear for intensities,
/// nearest-neighbor for labels, depth untouched.
pub fn resize_roi<T: Scalar>(
    roi: &RoiVolume<T>,
    spec: &RoiSpec,
    patch_size: usize,
) -> Result<RoiVolume<T>> {
    if roi.intensity.dim() != spec.crop_dims || roi.labels.dim() != spec.crop_dims {
        return Err(MrnError::Shape(format!(
            "region {} expects crop dims {:?}, got {:?}",
            spec.name,
            spec.crop_dims,
            roi.intensity.dim()
        )));
    }
    let (_, oh, ow) = spec.resized_dims(patch_size)?;
    Ok(RoiVolume {
        intensity: resize_volume_bilinear(&roi.intensity, oh, ow),
        labels: resize_volume_nearest(&roi.labels, oh, ow),
    })
}

/// Min-max scale intensities to [0, 1]; a flat volume becomes all zeros.
pub fn normalize_roi<T: Scalar>(intensity: &mut Array3<T>) {
    let mut mn = T::infinity();
    let mut mx = T::neg_infinity();
    for &v in intensity.iter() {
        if v < mn {
            mn = v;
        }
        if v > mx {
            mx = v;
        }
    }
    if mx > mn {
        let span = mx - mn;
        intensity.mapv_inplace(|v| (v - mn) / span);
    } else {
        intensity.fill(T::zero());
    }
}

/// Which regions to blank for the masking ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskPattern {
    pub nm: bool,
    pub qsm1: bool,
    pub qsm2: bool,
    pub qsm3: bool,
}

impl MaskPattern {
    pub fn get(self, roi: RoiName) -> bool {
        match roi {
            RoiName::Nm => self.nm,
            RoiName::Qsm1 => self.qsm1,
            RoiName::Qsm2 => self.qsm2,
            RoiName::Qsm3 => self.qsm3,
        }
    }

    /// All 16 patterns: the unmasked baseline first, then every nonempty
    /// subset in binary-counter order over (nm, qsm1, qsm2, qsm3).
    pub fn all_patterns() -> Vec<MaskPattern> {
        (0..16)
            .map(|bits| MaskPattern {
                nm: bits & 1 != 0,
                qsm1: bits & 2 != 0,
                qsm2: bits & 4 != 0,
                qsm3: bits & 8 != 0,
            })
            .collect()
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let masked: Vec<&str> = RoiName::ALL
            .iter()
            .filter(|r| self.get(**r))
            .map(|r| r.as_str())
            .collect();
        if masked.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&masked.join("+"))
        }
    }
}

/// Zero the intensity volumes of masked regions; labels stay untouched.
pub fn apply_mask<T: Scalar>(sample: &mut PatientSample<T>, pattern: MaskPattern) {
    for (i, name) in RoiName::ALL.iter().enumerate() {
        if pattern.get(*name) {
            sample.rois[i].intensity.fill(T::zero());
        }
    }
}

// ---- model assembly ----------------------------------------------------------

/// The shared branch: slice encoder, fused attention, segmentation decoder.
#[derive(Clone, Debug)]
pub struct ResConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub dpt: DptConfig,
}

#[derive(Clone, Debug)]
pub struct MrnConfig {
    pub res: ResConfig,
    pub specs: [RoiSpec; ROI_COUNT],
    /// Dropout rate between the classification head's two layers.
    pub cls_dropout: f64,
}

impl MrnConfig {
    pub fn validate(&self) -> Result<()> {
        self.res.fusion.validate()?;
        self.res.dpt.validate()?;
        if !(0.0..1.0).contains(&self.cls_dropout) {
            return Err(MrnError::Config(format!(
                "classification dropout {} outside [0, 1)",
                self.cls_dropout
            )));
        }
        for (spec, want) in self.specs.iter().zip(RoiName::ALL) {
            if spec.name != want {
                return Err(MrnError::Config(format!(
                    "region specs must be ordered {:?}; found {} where {} belongs",
                    RoiName::ALL,
                    spec.name,
                    want
                )));
            }
            let (_, oh, ow) = spec.resized_dims(self.res.encoder.patch_size)?;
            for side in [oh, ow] {
                if side % self.res.encoder.patch_size != 0 || side % 4 != 0 {
                    return Err(MrnError::Config(format!(
                        "region {} resized side {side} not divisible by patch {} and 4",
                        spec.name, self.res.encoder.patch_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest patch grid any region requests; sizes the positional tables.
    pub fn max_grid(&self) -> Result<(usize, usize)> {
        let s = self.res.encoder.patch_size;
        let mut grid = (0, 0);
        for spec in &self.specs {
            let (_, oh, ow) = spec.resized_dims(s)?;
            grid.0 = grid.0.max(oh / s);
            grid.1 = grid.1.max(ow / s);
        }
        Ok(grid)
    }

    /// Deepest region; sizes the slice position table.
    pub fn max_depth(&self) -> usize {
        self.specs.iter().map(|s| s.crop_dims.0).max().unwrap_or(0)
    }

    pub fn channel_dim(&self) -> usize {
        self.res.encoder.channel_dim
    }
}

/// Register the classification head: 4C -> 2C -> 2 with the smooth
/// rectifier and dropout between the layers.
pub fn init_classifier<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha12Rng,
    channel_dim: usize,
) {
    let width = 4 * channel_dim;
    params.insert_linear(rng, "cls.fc1", width, width / 2);
    params.insert_linear(rng, "cls.fc2", width / 2, 2);
}

/// Register every trainable tensor of the model: the shared branch (one copy
/// regardless of region count) plus the classification head.
pub fn init_mrn<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha12Rng,
    cfg: &MrnConfig,
) -> Result<()> {
    cfg.validate()?;
    init_encoder(params, rng, &cfg.res.encoder, cfg.max_grid()?);
    init_fusion(params, rng, &cfg.res.fusion, cfg.channel_dim(), cfg.max_depth());
    init_dpt(params, rng, &cfg.res.dpt, cfg.channel_dim());
    init_classifier(params, rng, cfg.channel_dim());
    Ok(())
}

// ---- forward passes ----------------------------------------------------------

/// One branch pass over a prepared region volume: encode slices, fuse, and
/// produce the region token plus (optionally) the segmentation map. The
/// decoder reads the encoder's own output tokens in its shallowest slot,
/// taken before slice positions are added.
pub fn res_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &ResConfig,
    volume: &Array3<T>,
    with_segmentation: bool,
    stoch: &mut Stoch<'_>,
) -> Result<(Option<SegMap>, Var)> {
    let (depth, height, width) = volume.dim();
    let slices = record_volume(tape, volume);
    let tokens = {
        let mut s = stoch.with_rate(cfg.encoder.drop_path_rate);
        encode_volume(tape, binder, params, &cfg.encoder, &slices, &mut s)?
    };
    let grid = tokens[0].grid;
    let field = token_field_from_slices(tape, &tokens)?;
    let encoder_final = field.patches;
    let field = add_slice_positions(tape, binder, params, field)?;
    let mut fusion_stoch = stoch.with_rate(cfg.fusion.drop_path_rate);
    let (field, trace) = ffa_stack(tape, binder, params, &cfg.fusion, field, &mut fusion_stoch);
    let seg = if with_segmentation {
        Some(segment_volume(
            tape,
            binder,
            params,
            &cfg.dpt,
            &trace,
            encoder_final,
            depth,
            grid,
            (height, width),
        )?)
    } else {
        None
    };
    let roi_token = sfa_stack(tape, binder, params, &cfg.fusion, field.slices, &mut fusion_stoch);
    Ok((seg, roi_token))
}

/// Map a patient representation row `(1, 4C)` to diagnosis logits `(1, 2)`.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    rep: Var,
    dropout_rate: f64,
    stoch: &mut Stoch<'_>,
) -> Var {
    let w1 = binder.bind(tape, params, "cls.fc1.w");
    let b1 = binder.bind(tape, params, "cls.fc1.b");
    let h = tape.matmul(rep, w1);
    let h = tape.add_rowvec(h, b1);
    let h = tape.gelu(h);
    let h = match stoch {
        Stoch::Eval => h,
        Stoch::Train { rng, .. } => tape.dropout(h, dropout_rate, rng),
    };
    let w2 = binder.bind(tape, params, "cls.fc2.w");
    let b2 = binder.bind(tape, params, "cls.fc2.b");
    let out = tape.matmul(h, w2);
    tape.add_rowvec(out, b2)
}

pub struct MrnOutput {
    /// `(1, 2)` diagnosis logits.
    pub class_logits: Var,
    /// `(1, 4C)` patient representation, regions in canonical order.
    pub rep: Var,
    /// Per-region segmentation maps when requested, canonical order.
    pub segmaps: Option<Vec<SegMap>>,
}

/// Full four-branch pass over one prepared sample. Every region runs through
/// the same parameters; gradients from all branches accumulate on the shared
/// tensors.
pub fn mrn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &MrnConfig,
    sample: &PatientSample<T>,
    with_segmentation: bool,
    stoch: &mut Stoch<'_>,
) -> Result<MrnOutput> {
    let mut roi_tokens = Vec::with_capacity(ROI_COUNT);
    let mut segmaps = Vec::with_capacity(ROI_COUNT);
    for (roi, spec) in sample.rois.iter().zip(&cfg.specs) {
        let (d, oh, ow) = spec.resized_dims(cfg.res.encoder.patch_size)?;
        if roi.intensity.dim() != (d, oh, ow) {
            return Err(MrnError::Shape(format!(
                "region {} must be resized to {:?} before the forward pass, got {:?}",
                spec.name,
                (d, oh, ow),
                roi.intensity.dim()
            )));
        }
        let (seg, token) = res_forward(
            tape,
            binder,
            params,
            &cfg.res,
            &roi.intensity,
            with_segmentation,
            stoch,
        )?;
        roi_tokens.push(token);
        if let Some(seg) = seg {
            segmaps.push(seg);
        }
    }
    let rep = tape.concat_cols(&roi_tokens);
    let class_logits = classify(tape, binder, params, rep, cfg.cls_dropout, stoch);
    Ok(MrnOutput {
        class_logits,
        rep,
        segmaps: with_segmentation.then_some(segmaps),
    })
}
