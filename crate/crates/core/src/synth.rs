//! Synthetic paired-modality patient generator: ellipsoidal nuclei planted
//! in two volumes (an NM-like and a QSM-like scan), a class-conditional
//! intensity shift inside designated nuclei, the on-disk sample format, and
//! the training-time augmentation suite.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MrnError, Result};
use crate::image_ops::{mirror_lr, rotate_volume_bilinear, rotate_volume_nearest};
use crate::losses::merge_lr_labels;
use crate::mrn::{
    crop_roi, normalize_roi, resize_roi, ClassLabel, Modality, PatientSample, RoiName, RoiSpec,
    RoiVolume, ROI_COUNT,
};
use crate::rng::{derive_rng, hash_str, tag};
use crate::scalar::{c, Scalar};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One left/right nucleus pair within a volume.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairGeometry {
    /// Raw label ids, (left, right).
    pub labels: (u8, u8),
    /// Nominal center as fractions of the (depth, height) extents.
    pub center_zy: (f64, f64),
    /// Lateral center offset from the midline, as a fraction of the width.
    pub lateral_offset: f64,
    /// Ellipsoid semi-axes in voxels, (z, y, x).
    pub radii: (f64, f64, f64),
    /// Intensity added inside the nucleus for every patient.
    pub base_delta: f64,
    /// Extra intensity for PD patients, scaled by `signal_strength`.
    pub pd_delta: f64,
}

/// Geometry of one synthetic modality volume.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityGeometry {
    pub dims: (usize, usize, usize),
    pub background: f64,
    pub pairs: Vec<PairGeometry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_patients: usize,
    /// Fraction of patients labeled PD.
    pub class_balance: f64,
    pub nm: ModalityGeometry,
    pub qsm: ModalityGeometry,
    /// Global multiplier on every pair's `pd_delta`; zero removes all class
    /// signal from the data.
    pub signal_strength: f64,
    /// Uniform per-nucleus center jitter in voxels.
    pub center_jitter: f64,
    /// Relative per-nucleus radius jitter.
    pub radius_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Geometry sized so every canonical region crop fits without padding.
    fn default() -> Self {
        SynthConfig {
            num_patients: 40,
            class_balance: 0.5,
            nm: ModalityGeometry {
                dims: (18, 48, 96),
                background: 0.2,
                pairs: vec![PairGeometry {
                    labels: (1, 2),
                    center_zy: (0.5, 0.5),
                    lateral_offset: 0.15,
                    radii: (2.5, 4.0, 7.0),
                    base_delta: 0.3,
                    pd_delta: 0.28,
                }],
            },
            qsm: ModalityGeometry {
                dims: (32, 160, 192),
                background: 0.2,
                pairs: vec![
                    PairGeometry {
                        labels: (1, 2),
                        center_zy: (0.5, 0.45),
                        lateral_offset: 0.18,
                        radii: (5.0, 12.0, 12.0),
                        base_delta: 0.25,
                        pd_delta: 0.0,
                    },
                    PairGeometry {
                        labels: (3, 4),
                        center_zy: (0.5, 0.55),
                        lateral_offset: 0.08,
                        radii: (3.0, 6.0, 8.0),
                        base_delta: 0.3,
                        pd_delta: 0.10,
                    },
                    PairGeometry {
                        labels: (5, 6),
                        center_zy: (0.5, 0.7),
                        lateral_offset: 0.12,
                        radii: (3.0, 5.0, 7.0),
                        base_delta: 0.28,
                        pd_delta: 0.0,
                    },
                ],
            },
            signal_strength: 1.0,
            center_jitter: 1.5,
            radius_jitter: 0.08,
            noise_sigma: 0.05,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(MrnError::Config(format!(
                "class balance must lie in [0, 1], got {}",
                self.class_balance
            )));
        }
        for (v, what) in [
            (self.signal_strength, "signal strength"),
            (self.center_jitter, "center jitter"),
            (self.radius_jitter, "radius jitter"),
            (self.noise_sigma, "noise sigma"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MrnError::Config(format!("{what} must be nonnegative, got {v}")));
            }
        }
        for (geo, name) in [(&self.nm, "nm"), (&self.qsm, "qsm")] {
            let mut seen = vec![0u8];
            for pair in &geo.pairs {
                for (side, id) in [(-1.0, pair.labels.0), (1.0, pair.labels.1)] {
                    if id == 0 || seen.contains(&id) {
                        return Err(MrnError::Config(format!(
                            "{name}: label id {id} is reserved or reused"
                        )));
                    }
                    seen.push(id);
                    let (d, h, w) = geo.dims;
                    let centers = [
                        pair.center_zy.0 * d as f64,
                        pair.center_zy.1 * h as f64,
                        w as f64 / 2.0 + side * pair.lateral_offset * w as f64,
                    ];
                    let radii = [pair.radii.0, pair.radii.1, pair.radii.2];
                    for a in 0..3 {
                        let reach =
                            radii[a] * (1.0 + self.radius_jitter) + self.center_jitter + 1.0;
                        let dim = [d, h, w][a] as f64;
                        if centers[a] - reach < 0.0 || centers[a] + reach > dim {
                            return Err(MrnError::Config(format!(
                                "{name}: nucleus {id} reaches outside the volume on axis {a} \
                                 (center {:.1}, reach {:.1}, extent {dim})",
                                centers[a], reach
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Deterministic class assignment spreading PD patients evenly through the
/// index range; the total count matches the balance within one patient.
pub fn patient_label(index: usize, class_balance: f64) -> ClassLabel {
    let below = (index as f64 * class_balance).floor();
    let above = ((index + 1) as f64 * class_balance).floor();
    if above > below {
        ClassLabel::Pd
    } else {
        ClassLabel::Hc
    }
}

/// Whole volumes for one synthetic patient, before region preparation.
#[derive(Clone, Debug)]
pub struct GeneratedPatient {
    pub id: String,
    pub label: ClassLabel,
    pub nm_intensity: Array3<f32>,
    pub nm_labels: Array3<u8>,
    pub qsm_intensity: Array3<f32>,
    pub qsm_labels: Array3<u8>,
}

fn synth_modality(
    rng: &mut ChaCha12Rng,
    geo: &ModalityGeometry,
    label: ClassLabel,
    signal_strength: f64,
    center_jitter: f64,
    radius_jitter: f64,
    noise_sigma: f64,
) -> (Array3<f32>, Array3<u8>) {
    let (d, h, w) = geo.dims;
    let mut vol = Array3::<f64>::from_elem((d, h, w), geo.background);
    let mut lab = Array3::<u8>::zeros((d, h, w));
    for pair in &geo.pairs {
        for (side, id) in [(-1.0, pair.labels.0), (1.0, pair.labels.1)] {
            let mut center = [
                pair.center_zy.0 * d as f64,
                pair.center_zy.1 * h as f64,
                w as f64 / 2.0 + side * pair.lateral_offset * w as f64,
            ];
            let mut radii = [pair.radii.0, pair.radii.1, pair.radii.2];
            for ax in &mut center {
                *ax += (f64::sample_uniform(rng) * 2.0 - 1.0) * center_jitter;
            }
            for r in &mut radii {
                *r *= 1.0 + (f64::sample_uniform(rng) * 2.0 - 1.0) * radius_jitter;
            }
            let delta = pair.base_delta
                + if label == ClassLabel::Pd { pair.pd_delta * signal_strength } else { 0.0 };
            let lo = |c: f64, r: f64| (c - r).floor().max(0.0) as usize;
            let hi = |c: f64, r: f64, n: usize| ((c + r).ceil() as usize + 1).min(n);
            for z in lo(center[0], radii[0])..hi(center[0], radii[0], d) {
                for y in lo(center[1], radii[1])..hi(center[1], radii[1], h) {
                    for x in lo(center[2], radii[2])..hi(center[2], radii[2], w) {
                        let dz = (z as f64 - center[0]) / radii[0];
                        let dy = (y as f64 - center[1]) / radii[1];
                        let dx = (x as f64 - center[2]) / radii[2];
                        if dz * dz + dy * dy + dx * dx <= 1.0 {
                            lab[(z, y, x)] = id;
                            vol[(z, y, x)] += delta;
                        }
                    }
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        for v in vol.iter_mut() {
            *v += f64::sample_normal(rng) * noise_sigma;
        }
    }
    (vol.mapv(|x| x as f32), lab)
}

/// Generate one patient with an explicit diagnosis. The random stream
/// depends only on (seed, patient id), never on the diagnosis, so setting
/// `signal_strength` to zero makes the two classes bit-identical.
pub fn generate_patient_with_label(
    cfg: &SynthConfig,
    index: usize,
    label: ClassLabel,
) -> Result<GeneratedPatient> {
    cfg.validate()?;
    let id = format!("p{index:04}");
    let mut rng = derive_rng(cfg.seed, &[tag::SYNTH_PATIENT, hash_str(&id)]);
    let (nm_intensity, nm_labels) = synth_modality(
        &mut rng,
        &cfg.nm,
        label,
        cfg.signal_strength,
        cfg.center_jitter,
        cfg.radius_jitter,
        cfg.noise_sigma,
    );
    let (qsm_intensity, qsm_labels) = synth_modality(
        &mut rng,
        &cfg.qsm,
        label,
        cfg.signal_strength,
        cfg.center_jitter,
        cfg.radius_jitter,
        cfg.noise_sigma,
    );
    Ok(GeneratedPatient { id, label, nm_intensity, nm_labels, qsm_intensity, qsm_labels })
}

pub fn generate_patient(cfg: &SynthConfig, index: usize) -> Result<GeneratedPatient> {
    generate_patient_with_label(cfg, index, patient_label(index, cfg.class_balance))
}

/// Raw-to-region label tables collapsing each left/right pair onto class 1
/// of its own region; nuclei belonging to other regions become background.
pub fn merge_table(roi: RoiName) -> Vec<u8> {
    match roi {
        RoiName::Nm => vec![0, 1, 1],
        RoiName::Qsm1 => vec![0, 1, 1, 0, 0, 0, 0],
        RoiName::Qsm2 => vec![0, 0, 0, 1, 1, 0, 0],
        RoiName::Qsm3 => vec![0, 0, 0, 0, 0, 1, 1],
    }
}

/// Crop, relabel, resize, and normalize all four regions of a generated
/// patient into a model-ready sample.
pub fn prepare_patient(
    gen: &GeneratedPatient,
    specs: &[RoiSpec; ROI_COUNT],
    patch_size: usize,
) -> Result<PatientSample<f32>> {
    let mut rois = Vec::with_capacity(ROI_COUNT);
    for spec in specs {
        let (vol, lab) = match spec.source_modality {
            Modality::Nm => (&gen.nm_intensity, &gen.nm_labels),
            Modality::Qsm => (&gen.qsm_intensity, &gen.qsm_labels),
        };
        let crop = crop_roi(vol, lab, spec)?;
        let merged = merge_lr_labels(&crop.labels, &merge_table(spec.name))?;
        let mut resized =
            resize_roi(&RoiVolume { intensity: crop.intensity, labels: merged }, spec, patch_size)?;
        normalize_roi(&mut resized.intensity);
        rois.push(resized);
    }
    let rois: [RoiVolume<f32>; ROI_COUNT] =
        rois.try_into().map_err(|_| MrnError::Shape("region count drift".into()))?;
    Ok(PatientSample { id: gen.id.clone(), label: gen.label, rois })
}

// ---- on-disk sample format ----------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    axis_order: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RoiFiles {
    pub intensity: String,
    pub labels: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub label: String,
    pub nm: RoiFiles,
    pub qsm1: RoiFiles,
    pub qsm2: RoiFiles,
    pub qsm3: RoiFiles,
    #[serde(default)]
    pub split_tag: Option<String>,
}

impl ManifestEntry {
    pub fn files(&self, roi: RoiName) -> &RoiFiles {
        match roi {
            RoiName::Nm => &self.nm,
            RoiName::Qsm1 => &self.qsm1,
            RoiName::Qsm2 => &self.qsm2,
            RoiName::Qsm3 => &self.qsm3,
        }
    }

    pub fn class_label(&self) -> Result<ClassLabel> {
        match self.label.as_str() {
            "hc" => Ok(ClassLabel::Hc),
            "pd" => Ok(ClassLabel::Pd),
            other => Err(MrnError::Data(format!(
                "patient {}: unknown label {other:?}",
                self.patient_id
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub patients: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(MrnError::Data(format!(
                "manifest schema {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut ids: Vec<&str> = self.patients.iter().map(|e| e.patient_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(dup) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(MrnError::Data(format!("duplicate patient id {}", dup[0])));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| MrnError::io(path, e))?;
    f.write_all(bytes).map_err(|e| MrnError::io(path, e))
}

fn write_sidecar(path: &Path, shape: (usize, usize, usize), dtype: &str) -> Result<()> {
    let sidecar = Sidecar {
        shape: vec![shape.0, shape.1, shape.2],
        dtype: dtype.to_string(),
        axis_order: "DHW".to_string(),
    };
    let json = serde_json::to_vec_pretty(&sidecar)
        .map_err(|e| MrnError::Data(format!("sidecar encode: {e}")))?;
    write_file(path, &json)
}

fn read_sidecar(path: &Path) -> Result<(usize, usize, usize, String)> {
    let bytes = fs::read(path).map_err(|e| MrnError::io(path, e))?;
    let sc: Sidecar = serde_json::from_slice(&bytes)
        .map_err(|e| MrnError::Data(format!("bad sidecar {}: {e}", path.display())))?;
    if sc.axis_order != "DHW" {
        return Err(MrnError::Data(format!(
            "{}: unsupported axis order {}",
            path.display(),
            sc.axis_order
        )));
    }
    if sc.shape.len() != 3 {
        return Err(MrnError::Data(format!(
            "{}: expected a 3-axis shape, got {:?}",
            path.display(),
            sc.shape
        )));
    }
    Ok((sc.shape[0], sc.shape[1], sc.shape[2], sc.dtype))
}

fn read_payload(path: &Path, expected_len: usize) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| MrnError::io(path, e))?;
    let mut bytes = vec![0u8; expected_len];
    f.read_exact(&mut bytes).map_err(|e| MrnError::io(path, e))?;
    let mut probe = [0u8; 1];
    match f.read(&mut probe) {
        Ok(0) => Ok(bytes),
        Ok(_) => Err(MrnError::Data(format!(
            "{}: payload longer than its sidecar shape",
            path.display()
        ))),
        Err(e) => Err(MrnError::io(path, e)),
    }
}

fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().expect("data file name").to_os_string();
    name.push(".json");
    data.with_file_name(name)
}

fn write_roi(dir: &Path, roi: RoiName, vol: &RoiVolume<f32>) -> Result<RoiFiles> {
    let stem = roi.as_str();
    let ipath = dir.join(format!("{stem}.f32"));
    let mut bytes = Vec::with_capacity(vol.intensity.len() * 4);
    for &v in vol.intensity.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&ipath, &bytes)?;
    write_sidecar(&sidecar_path(&ipath), vol.intensity.dim(), "f32")?;

    let lpath = dir.join(format!("{stem}.labels.u8"));
    let lbytes: Vec<u8> = vol.labels.iter().copied().collect();
    write_file(&lpath, &lbytes)?;
    write_sidecar(&sidecar_path(&lpath), vol.labels.dim(), "u8")?;

    let rel = |p: &Path| {
        p.strip_prefix(dir.parent().unwrap_or(dir))
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    Ok(RoiFiles { intensity: rel(&ipath), labels: rel(&lpath) })
}

fn read_roi<T: Scalar>(root: &Path, files: &RoiFiles) -> Result<RoiVolume<T>> {
    let ipath = root.join(&files.intensity);
    let (d, h, w, dtype) = read_sidecar(&sidecar_path(&ipath))?;
    if dtype != "f32" {
        return Err(MrnError::Data(format!("{}: expected f32, got {dtype}", ipath.display())));
    }
    let bytes = read_payload(&ipath, d * h * w * 4)?;
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|b| c::<T>(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))))
        .collect();
    let intensity = Array3::from_shape_vec((d, h, w), values)
        .map_err(|e| MrnError::Data(format!("{}: {e}", ipath.display())))?;

    let lpath = root.join(&files.labels);
    let (ld, lh, lw, dtype) = read_sidecar(&sidecar_path(&lpath))?;
    if dtype != "u8" {
        return Err(MrnError::Data(format!("{}: expected u8, got {dtype}", lpath.display())));
    }
    if (ld, lh, lw) != (d, h, w) {
        return Err(MrnError::Data(format!(
            "{}: label shape {:?} disagrees with intensity {:?}",
            lpath.display(),
            (ld, lh, lw),
            (d, h, w)
        )));
    }
    let lbytes = read_payload(&lpath, ld * lh * lw)?;
    let labels = Array3::from_shape_vec((ld, lh, lw), lbytes)
        .map_err(|e| MrnError::Data(format!("{}: {e}", lpath.display())))?;
    Ok(RoiVolume { intensity, labels })
}

/// Write one prepared sample into `root/<patient_id>/`.
pub fn write_sample(root: &Path, sample: &PatientSample<f32>) -> Result<ManifestEntry> {
    let dir = root.join(&sample.id);
    fs::create_dir_all(&dir).map_err(|e| MrnError::io(&dir, e))?;
    let mut files = Vec::with_capacity(ROI_COUNT);
    for (roi, vol) in RoiName::ALL.iter().zip(&sample.rois) {
        files.push(write_roi(&dir, *roi, vol)?);
    }
    let mut it = files.into_iter();
    Ok(ManifestEntry {
        patient_id: sample.id.clone(),
        label: sample.label.as_str().to_string(),
        nm: it.next().unwrap(),
        qsm1: it.next().unwrap(),
        qsm2: it.next().unwrap(),
        qsm3: it.next().unwrap(),
        split_tag: None,
    })
}

/// Read one sample back; `T` is the compute precision (files hold f32).
pub fn load_sample<T: Scalar>(root: &Path, entry: &ManifestEntry) -> Result<PatientSample<T>> {
    let label = entry.class_label()?;
    let mut rois = Vec::with_capacity(ROI_COUNT);
    for roi in RoiName::ALL {
        rois.push(read_roi::<T>(root, entry.files(roi))?);
    }
    let rois: [RoiVolume<T>; ROI_COUNT] =
        rois.try_into().map_err(|_| MrnError::Shape("region count drift".into()))?;
    Ok(PatientSample { id: entry.patient_id.clone(), label, rois })
}

/// Generate, prepare, and write a full dataset; returns the manifest that
/// was also written to `root/manifest.json`. Patients are generated in
/// parallel — each draws from its own (seed, id)-derived stream, so the
/// output is independent of scheduling.
pub fn write_dataset(
    cfg: &SynthConfig,
    specs: &[RoiSpec; ROI_COUNT],
    patch_size: usize,
    root: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| MrnError::io(root, e))?;
    let entries: Result<Vec<ManifestEntry>> = (0..cfg.num_patients)
        .into_par_iter()
        .map(|i| {
            let gen = generate_patient(cfg, i)?;
            let sample = prepare_patient(&gen, specs, patch_size)?;
            write_sample(root, &sample)
        })
        .collect();
    let manifest =
        DatasetManifest { schema_version: MANIFEST_SCHEMA_VERSION, seed: cfg.seed, patients: entries? };
    manifest.validate()?;
    let path = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| MrnError::Data(format!("manifest encode: {e}")))?;
    write_file(&path, &json)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| MrnError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| MrnError::Data(format!("bad manifest {}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

// ---- augmentation --------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub p_mirror: f64,
    pub p_rotate: f64,
    /// Maximum in-plane rotation magnitude, radians.
    pub max_rotate: f64,
    pub p_intensity: f64,
    pub max_shift: f64,
    pub p_contrast: f64,
    /// Contrast factor drawn from `1 ± max_contrast`.
    pub max_contrast: f64,
    pub p_noise: f64,
    pub noise_sigma: f64,
    pub p_histogram: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            p_mirror: 0.5,
            p_rotate: 0.5,
            max_rotate: 10.0_f64.to_radians(),
            p_intensity: 0.5,
            max_shift: 0.1,
            p_contrast: 0.5,
            max_contrast: 0.2,
            p_noise: 0.25,
            noise_sigma: 0.03,
            p_histogram: 0.25,
        }
    }
}

impl AugConfig {
    /// Every augmentation disabled; `augment` becomes the identity.
    pub fn disabled() -> Self {
        AugConfig {
            p_mirror: 0.0,
            p_rotate: 0.0,
            max_rotate: 0.0,
            p_intensity: 0.0,
            max_shift: 0.0,
            p_contrast: 0.0,
            max_contrast: 0.0,
            p_noise: 0.0,
            noise_sigma: 0.0,
            p_histogram: 0.0,
        }
    }
}

fn clamp01<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        T::zero()
    } else if x > T::one() {
        T::one()
    } else {
        x
    }
}

fn map_intensities<T: Scalar>(s: &PatientSample<T>, f: impl Fn(T) -> T) -> PatientSample<T> {
    let mut out = s.clone();
    for roi in &mut out.rois {
        roi.intensity.mapv_inplace(&f);
    }
    out
}

/// Flip every region left-right, intensities and labels together. Valid as
/// an augmentation because the label pairs are left-right merged.
pub fn mirror_sample<T: Scalar>(s: &PatientSample<T>) -> PatientSample<T> {
    let mut out = s.clone();
    for roi in &mut out.rois {
        roi.intensity = mirror_lr(&roi.intensity);
        roi.labels = mirror_lr(&roi.labels);
    }
    out
}

/// In-plane rotation of every slice: bilinear for intensities, nearest for
/// labels.
pub fn rotate_sample<T: Scalar>(s: &PatientSample<T>, angle_rad: f64) -> PatientSample<T> {
    let mut out = s.clone();
    for roi in &mut out.rois {
        roi.intensity = rotate_volume_bilinear(&roi.intensity, angle_rad);
        roi.labels = rotate_volume_nearest(&roi.labels, angle_rad);
    }
    out
}

/// Add a constant to every intensity, clipped back into `[0, 1]`.
pub fn shift_intensity<T: Scalar>(s: &PatientSample<T>, delta: f64) -> PatientSample<T> {
    let d = c::<T>(delta);
    map_intensities(s, |x| clamp01(x + d))
}

/// Rescale contrast about each region's mean intensity.
pub fn scale_contrast<T: Scalar>(s: &PatientSample<T>, factor: f64) -> PatientSample<T> {
    let f = c::<T>(factor);
    let mut out = s.clone();
    for roi in &mut out.rois {
        let n = c::<T>(roi.intensity.len() as f64);
        let mean = roi.intensity.iter().fold(T::zero(), |a, &b| a + b) / n;
        roi.intensity.mapv_inplace(|x| clamp01(mean + f * (x - mean)));
    }
    out
}

/// Independent Gaussian perturbation of every voxel, clipped to `[0, 1]`.
pub fn add_noise<T: Scalar>(
    s: &PatientSample<T>,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> PatientSample<T> {
    let mut out = s.clone();
    for roi in &mut out.rois {
        for v in roi.intensity.iter_mut() {
            *v = clamp01(*v + c::<T>(f64::sample_normal(rng) * sigma));
        }
    }
    out
}

/// Monotone piecewise-linear intensity remap through `(0,0)`, the three
/// control points, and `(1,1)`.
pub fn remap_histogram<T: Scalar>(
    s: &PatientSample<T>,
    control: &[(f64, f64); 3],
) -> PatientSample<T> {
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for &(x, y) in control {
        xs.push(x.clamp(0.0, 1.0));
        ys.push(y.clamp(0.0, 1.0));
    }
    xs.push(1.0);
    ys.push(1.0);
    map_intensities(s, |v| {
        let x = v.to_f64_c().clamp(0.0, 1.0);
        let k = xs.windows(2).position(|w| x <= w[1]).unwrap_or(3);
        let (x0, x1, y0, y1) = (xs[k], xs[k + 1], ys[k], ys[k + 1]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        c::<T>(y0 + t * (y1 - y0))
    })
}

/// Draw three sorted control points, each coordinate in (0, 1).
fn draw_control_points(rng: &mut ChaCha12Rng) -> [(f64, f64); 3] {
    let mut xs: Vec<f64> = (0..3).map(|_| 0.05 + 0.9 * f64::sample_uniform(rng)).collect();
    let mut ys: Vec<f64> = (0..3).map(|_| 0.05 + 0.9 * f64::sample_uniform(rng)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    [(xs[0], ys[0]), (xs[1], ys[1]), (xs[2], ys[2])]
}

/// Apply each augmentation independently with its configured probability.
/// One draw gates each transform and one set of parameters applies to all
/// four regions, keeping the patient anatomically coherent.
pub fn augment<T: Scalar>(
    s: &PatientSample<T>,
    cfg: &AugConfig,
    rng: &mut ChaCha12Rng,
) -> PatientSample<T> {
    let mut out = s.clone();
    if f64::sample_uniform(rng) < cfg.p_mirror {
        out = mirror_sample(&out);
    }
    if f64::sample_uniform(rng) < cfg.p_rotate {
        let angle = (f64::sample_uniform(rng) * 2.0 - 1.0) * cfg.max_rotate;
        out = rotate_sample(&out, angle);
    }
    if f64::sample_uniform(rng) < cfg.p_intensity {
        let delta = (f64::sample_uniform(rng) * 2.0 - 1.0) * cfg.max_shift;
        out = shift_intensity(&out, delta);
    }
    if f64::sample_uniform(rng) < cfg.p_contrast {
        let factor = 1.0 + (f64::sample_uniform(rng) * 2.0 - 1.0) * cfg.max_contrast;
        out = scale_contrast(&out, factor);
    }
    if f64::sample_uniform(rng) < cfg.p_noise {
        out = add_noise(&out, cfg.noise_sigma, rng);
    }
    if f64::sample_uniform(rng) < cfg.p_histogram {
        let control = draw_control_points(rng);
        out = remap_histogram(&out, &control);
    }
    out
}
