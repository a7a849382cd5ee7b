//! Two-stage optimization: AdamW over per-module parameter groups, the
//! epoch/batch loop driving the momentum teacher and class memory bank,
//! evaluation, stratified cross-validation with fold ensembling, and the
//! region-masking study.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::Stoch;
use crate::checkpoint::{self, CheckpointMeta};
use crate::dpt::{argmax_labels, segmap_values};
use crate::error::{MrnError, Result};
use crate::losses::{class_ce, seg_loss, total_loss, LossWeights, Stage};
use crate::metrics::{self, MetricsReport};
use crate::moco::{
    contrastive_loss, init_proj, project, projection_value, MemoryBank, ProjConfig, Teacher,
};
use crate::mrn::{
    apply_mask, init_mrn, mrn_forward, ClassLabel, MaskPattern, MrnConfig, PatientSample,
    ROI_COUNT,
};
use crate::params::{Binder, ParamSet};
use crate::rng::{derive_rng, hash_str, tag};
use crate::scalar::{c, Scalar};
use crate::synth::{augment, AugConfig};
use crate::tape::{Tape, Var};

// ---- parameter groups ----------------------------------------------------------

/// Name prefixes of the shared backbone (slice encoder and both fusion
/// attention stacks).
pub const BACKBONE_PREFIXES: [&str; 4] = ["enc.", "ffa", "fus.", "sfa"];
/// Name prefixes of the task heads (decoder, classifier, projector).
pub const HEAD_PREFIXES: [&str; 3] = ["dpt.", "cls.", "prj."];

/// One optimizer group: member tensor names plus its learning rate and
/// decoupled weight decay.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Partition every trainable tensor into the backbone group and the heads
/// group. During pretraining the classifier is left out entirely, so neither
/// gradients nor weight decay can move it before its loss is active.
pub fn make_param_groups<T: Scalar>(
    params: &ParamSet<T>,
    stage: Stage,
    backbone: (f64, f64),
    heads: (f64, f64),
) -> Result<Vec<ParamGroup>> {
    let mut backbone_names = Vec::new();
    let mut head_names = Vec::new();
    for name in params.names() {
        if BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)) {
            backbone_names.push(name.clone());
        } else if HEAD_PREFIXES.iter().any(|p| name.starts_with(p)) {
            if stage == Stage::Pretrain && name.starts_with("cls.") {
                continue;
            }
            head_names.push(name.clone());
        } else {
            return Err(MrnError::Config(format!(
                "parameter {name} belongs to no optimizer group"
            )));
        }
    }
    Ok(vec![
        ParamGroup { names: backbone_names, lr: backbone.0, weight_decay: backbone.1 },
        ParamGroup { names: head_names, lr: heads.0, weight_decay: heads.1 },
    ])
}

// ---- AdamW ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamwConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamwConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(MrnError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(MrnError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

struct Moments<T: Scalar> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    step: usize,
}

/// AdamW with decoupled weight decay. State is lazy per tensor: a tensor that
/// received no gradient this step is left untouched (no decay, no moment
/// update), so heads with intermittent losses do not drift.
pub struct AdamW<T: Scalar> {
    cfg: AdamwConfig,
    groups: Vec<ParamGroup>,
    state: IndexMap<String, Moments<T>>,
}

fn validate_groups(groups: &[ParamGroup]) -> Result<()> {
    for g in groups {
        if !(g.lr.is_finite() && g.lr >= 0.0) {
            return Err(MrnError::Config(format!("learning rate must be >= 0, got {}", g.lr)));
        }
        if !(g.weight_decay.is_finite() && g.weight_decay >= 0.0) {
            return Err(MrnError::Config(format!(
                "weight decay must be >= 0, got {}",
                g.weight_decay
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamwConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        cfg.validate()?;
        validate_groups(&groups)?;
        Ok(AdamW { cfg, groups, state: IndexMap::new() })
    }

    /// Swap the group layout (e.g. at a stage boundary) while keeping all
    /// accumulated moments.
    pub fn set_groups(&mut self, groups: Vec<ParamGroup>) -> Result<()> {
        validate_groups(&groups)?;
        self.groups = groups;
        Ok(())
    }

    /// One update over every grouped tensor that has a gradient entry.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &IndexMap<String, ArrayD<T>>,
    ) -> Result<()> {
        let b1 = c::<T>(self.cfg.beta1);
        let b2 = c::<T>(self.cfg.beta2);
        let ob1 = c::<T>(1.0 - self.cfg.beta1);
        let ob2 = c::<T>(1.0 - self.cfg.beta2);
        let epst = c::<T>(self.cfg.eps);
        for group in &self.groups {
            let decay = c::<T>(1.0 - group.lr * group.weight_decay);
            let lrt = c::<T>(group.lr);
            for name in &group.names {
                let Some(g) = grads.get(name) else { continue };
                let theta = params.get_mut(name).ok_or_else(|| {
                    MrnError::Config(format!("optimizer group names missing tensor {name}"))
                })?;
                if g.shape() != theta.shape() {
                    return Err(MrnError::Shape(format!(
                        "gradient for {name} has shape {:?}, tensor has {:?}",
                        g.shape(),
                        theta.shape()
                    )));
                }
                let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                    m: ArrayD::zeros(g.raw_dim()),
                    v: ArrayD::zeros(g.raw_dim()),
                    step: 0,
                });
                st.step += 1;
                st.m.zip_mut_with(g, |m, &gv| *m = *m * b1 + gv * ob1);
                st.v.zip_mut_with(g, |v, &gv| *v = *v * b2 + gv * gv * ob2);
                let bc1 = c::<T>(1.0 - self.cfg.beta1.powi(st.step as i32));
                let bc2 = c::<T>(1.0 - self.cfg.beta2.powi(st.step as i32));
                ndarray::Zip::from(&mut *theta).and(&st.m).and(&st.v).for_each(|t, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *t = *t * decay - lrt * mhat / (vhat.sqrt() + epst);
                });
            }
        }
        Ok(())
    }

    /// Moment tensors and per-tensor step counts as namespaced entries for a
    /// checkpoint archive.
    pub fn export_state(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::with_capacity(3 * self.state.len());
        for (name, st) in &self.state {
            out.push((format!("opt.m.{name}"), st.m.clone()));
            out.push((format!("opt.v.{name}"), st.v.clone()));
            out.push((
                format!("opt.t.{name}"),
                ArrayD::from_elem(IxDyn(&[1]), c::<T>(st.step as f64)),
            ));
        }
        out
    }
}

// ---- configuration -------------------------------------------------------------

/// Momentum-contrast settings: projector layout, temperature, teacher
/// momentum, and per-class bank capacity.
#[derive(Clone, Debug)]
pub struct MocoConfig {
    pub proj: ProjConfig,
    pub tau: f64,
    pub momentum: f64,
    pub bank_capacity: usize,
}

impl MocoConfig {
    pub fn validate(&self) -> Result<()> {
        self.proj.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MrnError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(MrnError::Config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.bank_capacity == 0 {
            return Err(MrnError::Config("memory bank capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// Full training schedule and hyperparameters for both stages.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub wd_backbone: f64,
    pub lr_heads: f64,
    pub wd_heads: f64,
    pub adamw: AdamwConfig,
    pub lambda_seg: f64,
    pub lambda_cl: f64,
    pub moco: MocoConfig,
    pub augment: AugConfig,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: Option<usize>,
    /// Extra checkpoints every this many epochs (stage boundaries always get one).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_pretrain: 400,
            epochs_finetune: 200,
            batch_size: 4,
            lr_backbone: 1e-5,
            wd_backbone: 1e-1,
            lr_heads: 1e-4,
            wd_heads: 5e-2,
            adamw: AdamwConfig::default(),
            lambda_seg: 1.0,
            lambda_cl: 1.0,
            moco: MocoConfig {
                proj: ProjConfig { input_dim: 3072, hidden_dim: 3072, output_dim: 128 },
                tau: 0.1,
                momentum: 0.999,
                bank_capacity: 1024,
            },
            augment: AugConfig::default(),
            seed: 1,
            eval_every: Some(1),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MrnError::Config("batch size must be at least 1".into()));
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_heads", self.lr_heads)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(MrnError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, wd) in [("wd_backbone", self.wd_backbone), ("wd_heads", self.wd_heads)] {
            if !(wd >= 0.0 && wd.is_finite()) {
                return Err(MrnError::Config(format!("{name} must be >= 0, got {wd}")));
            }
        }
        self.adamw.validate()?;
        LossWeights {
            lambda_seg: self.lambda_seg,
            lambda_cl: self.lambda_cl,
            stage: Stage::Pretrain,
        }
        .validate()?;
        self.moco.validate()?;
        for (name, every) in
            [("eval_every", self.eval_every), ("checkpoint_every", self.checkpoint_every)]
        {
            if every == Some(0) {
                return Err(MrnError::Config(format!("{name} must be at least 1 when set")));
            }
        }
        Ok(())
    }
}

// ---- model assembly ------------------------------------------------------------

/// Fresh trainable weights: the four-branch network plus the projector, drawn
/// from the seed's init stream. The projector input must match the patient
/// representation width.
pub fn init_model<T: Scalar>(
    mrn_cfg: &MrnConfig,
    moco: &MocoConfig,
    seed: u64,
) -> Result<ParamSet<T>> {
    moco.validate()?;
    if moco.proj.input_dim != ROI_COUNT * mrn_cfg.channel_dim() {
        return Err(MrnError::Config(format!(
            "projector reads {} features but the patient representation has {}",
            moco.proj.input_dim,
            ROI_COUNT * mrn_cfg.channel_dim()
        )));
    }
    let mut params = ParamSet::new();
    let mut rng = derive_rng(seed, &[tag::INIT]);
    init_mrn(&mut params, &mut rng, mrn_cfg)?;
    init_proj(&mut params, &mut rng, &moco.proj);
    Ok(params)
}

// ---- inference and evaluation --------------------------------------------------

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).iter().next().map(|x| x.to_f64_c()).unwrap_or(f64::NAN)
}

fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

/// Class probabilities for one sample in eval mode (no segmentation decode,
/// no stochastic regularizers, nothing tracked for gradients).
pub fn predict_probs(
    params: &ParamSet<f32>,
    cfg: &MrnConfig,
    sample: &PatientSample<f32>,
) -> Result<[f64; 2]> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen();
    let out = mrn_forward(&mut tape, &mut binder, params, cfg, sample, false, &mut Stoch::Eval)?;
    let logits: Vec<f64> = tape.value(out.class_logits).iter().map(|v| v.to_f64_c()).collect();
    Ok(softmax2(logits[0], logits[1]))
}

fn evaluate_with_mask(
    params: &ParamSet<f32>,
    cfg: &MrnConfig,
    data: &[PatientSample<f32>],
    pattern: Option<MaskPattern>,
) -> Result<MetricsReport> {
    let probs: Vec<[f64; 2]> = data
        .par_iter()
        .map(|s| match pattern {
            None => predict_probs(params, cfg, s),
            Some(p) => {
                let mut masked = s.clone();
                apply_mask(&mut masked, p);
                predict_probs(params, cfg, &masked)
            }
        })
        .collect::<Result<_>>()?;
    let truths: Vec<ClassLabel> = data.iter().map(|s| s.label).collect();
    metrics::report(&probs, &truths)
}

/// Classification metrics over a dataset in eval mode.
pub fn evaluate(
    params: &ParamSet<f32>,
    cfg: &MrnConfig,
    data: &[PatientSample<f32>],
) -> Result<MetricsReport> {
    evaluate_with_mask(params, cfg, data, None)
}

/// Hard-label overlap between decoded masks and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    /// Mean Dice over every (sample, region, foreground class) with any
    /// target voxels.
    pub mean_dice: f64,
    /// Same mean broken out per region; `None` when no target foreground.
    pub per_roi: [Option<f64>; ROI_COUNT],
}

/// Decode every sample's masks with argmax and score hard Dice against the
/// label grids, skipping classes absent from a target.
pub fn evaluate_segmentation(
    params: &ParamSet<f32>,
    cfg: &MrnConfig,
    data: &[PatientSample<f32>],
) -> Result<SegReport> {
    let per_sample: Vec<[Vec<f64>; ROI_COUNT]> = data
        .par_iter()
        .map(|s| -> Result<[Vec<f64>; ROI_COUNT]> {
            let mut tape = Tape::<f32>::new();
            let mut binder = Binder::frozen();
            let out =
                mrn_forward(&mut tape, &mut binder, params, cfg, s, true, &mut Stoch::Eval)?;
            let maps = out.segmaps.expect("segmentation requested");
            let mut scores: [Vec<f64>; ROI_COUNT] = Default::default();
            for (i, map) in maps.iter().enumerate() {
                let pred = argmax_labels(&segmap_values(&tape, map));
                let target = &s.rois[i].labels;
                if pred.dim() != target.dim() {
                    return Err(MrnError::Shape(format!(
                        "decoded mask {:?} vs target {:?} for patient {}",
                        pred.dim(),
                        target.dim(),
                        s.id
                    )));
                }
                for k in 1..map.classes as u8 {
                    let gt = target.iter().filter(|&&t| t == k).count();
                    if gt == 0 {
                        continue;
                    }
                    let pp = pred.iter().filter(|&&p| p == k).count();
                    let tp = pred.iter().zip(target.iter()).filter(|(&p, &t)| p == k && t == k).count();
                    scores[i].push(2.0 * tp as f64 / (pp + gt) as f64);
                }
            }
            Ok(scores)
        })
        .collect::<Result<_>>()?;
    let mut per_roi_sums = [(0.0f64, 0usize); ROI_COUNT];
    for scores in &per_sample {
        for (i, vals) in scores.iter().enumerate() {
            per_roi_sums[i].0 += vals.iter().sum::<f64>();
            per_roi_sums[i].1 += vals.len();
        }
    }
    let total: f64 = per_roi_sums.iter().map(|(s, _)| s).sum();
    let count: usize = per_roi_sums.iter().map(|(_, n)| n).sum();
    if count == 0 {
        return Err(MrnError::Data("no target foreground voxels in any region".into()));
    }
    let per_roi = per_roi_sums.map(|(s, n)| (n > 0).then(|| s / n as f64));
    Ok(SegReport { mean_dice: total / count as f64, per_roi })
}

// ---- training loop -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRecord {
    pub backbone: f64,
    pub heads: f64,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_seg: f64,
    /// Mean over samples that had any positive key available.
    pub loss_cl: f64,
    pub cl_active: usize,
    pub cl_skipped: usize,
    pub lr: LrRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<MetricsReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final student weights (network plus projector).
    pub params: ParamSet<f32>,
    pub records: Vec<EpochRecord>,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

struct EpochStats {
    total: f64,
    cls: f64,
    seg: f64,
    cl: f64,
    cl_active: usize,
    cl_skipped: usize,
}

fn teacher_key(
    teacher: &ParamSet<f32>,
    cfg: &MrnConfig,
    sample: &PatientSample<f32>,
) -> Result<Array1<f32>> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen();
    let out = mrn_forward(&mut tape, &mut binder, teacher, cfg, sample, false, &mut Stoch::Eval)?;
    let z = project(&mut tape, &mut binder, teacher, out.rep)?;
    Ok(projection_value(&tape, z))
}

struct SampleOut {
    grads: IndexMap<String, ArrayD<f32>>,
    total: f64,
    cls: f64,
    seg: f64,
    cl: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    data: &[PatientSample<f32>],
    mrn_cfg: &MrnConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    epoch: usize,
    params: &mut ParamSet<f32>,
    teacher: &mut Teacher<f32>,
    bank: &mut MemoryBank<f32>,
    opt: &mut AdamW<f32>,
    step_counter: &mut usize,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derive_rng(cfg.seed, &[tag::SHUFFLE, epoch as u64]));

    let mut stats = EpochStats { total: 0.0, cls: 0.0, seg: 0.0, cl: 0.0, cl_active: 0, cl_skipped: 0 };
    for batch in order.chunks(cfg.batch_size) {
        let step = *step_counter;
        let batch_ids: Vec<&str> = batch.iter().map(|&i| data[i].id.as_str()).collect();
        let batch_ids = batch_ids.join(",");

        // Pass 1: augment each sample once and key it through the frozen
        // teacher; the student will see the identical view.
        let teacher_params = &teacher.params;
        let views: Vec<(PatientSample<f32>, Array1<f32>)> = batch
            .par_iter()
            .map(|&idx| -> Result<(PatientSample<f32>, Array1<f32>)> {
                let mut arng = derive_rng(cfg.seed, &[tag::AUGMENT, epoch as u64, idx as u64]);
                let view = augment(&data[idx], &cfg.augment, &mut arng);
                let key = teacher_key(teacher_params, mrn_cfg, &view)?;
                Ok((view, key))
            })
            .collect::<Result<_>>()?;
        let batch_keys: Vec<(ClassLabel, Array1<f32>)> =
            views.iter().map(|(v, k)| (v.label, k.clone())).collect();

        // Pass 2: student forward/backward per sample.
        let model: &ParamSet<f32> = params;
        let bank_ref: &MemoryBank<f32> = bank;
        let outs: Vec<SampleOut> = (0..batch.len())
            .into_par_iter()
            .map(|pos| -> Result<SampleOut> {
                let idx = batch[pos];
                let (view, _) = &views[pos];
                let mut tape = Tape::<f32>::new();
                let mut binder = Binder::trainable();
                let mut drng = derive_rng(cfg.seed, &[tag::DROPOUT, epoch as u64, idx as u64]);
                // The rate here is a placeholder: each module applies its own
                // configured drop-path rate; only the stream matters.
                let mut stoch = Stoch::Train { drop_path: 0.0, rng: &mut drng };
                let out =
                    mrn_forward(&mut tape, &mut binder, model, mrn_cfg, view, true, &mut stoch)?;
                let maps = out.segmaps.expect("segmentation requested");
                let targets: Vec<&Array3<u8>> = view.rois.iter().map(|r| &r.labels).collect();
                let seg = seg_loss(&mut tape, &maps, &targets, &[true; ROI_COUNT])?;
                let cls = class_ce(&mut tape, out.class_logits, view.label);
                let z = project(&mut tape, &mut binder, model, out.rep)?;
                let cl = match bank_ref.gather(view.label, &batch_keys) {
                    Some((pos_keys, neg_keys)) => {
                        Some(contrastive_loss(&mut tape, z, &pos_keys, &neg_keys, cfg.moco.tau)?)
                    }
                    None => None,
                };
                let total = total_loss(&mut tape, cls, seg, cl, weights)?;
                let out = SampleOut {
                    grads: IndexMap::new(),
                    total: scalar_of(&tape, total),
                    cls: scalar_of(&tape, cls),
                    seg: scalar_of(&tape, seg),
                    cl: cl.map(|v| scalar_of(&tape, v)),
                };
                let finite = out.total.is_finite()
                    && out.cls.is_finite()
                    && out.seg.is_finite()
                    && out.cl.map_or(true, f64::is_finite);
                if !finite {
                    return Err(MrnError::Numeric(format!(
                        "non-finite loss at epoch {epoch} step {step} on patient {} \
                         (batch {batch_ids}): total={} cls={} seg={} cl={:?}",
                        view.id, out.total, out.cls, out.seg, out.cl
                    )));
                }
                let mut grads = tape.backward(total);
                let named = binder.take_grads(&mut grads);
                Ok(SampleOut { grads: named, ..out })
            })
            .collect::<Result<_>>()?;

        // Batch-mean gradients folded in batch order, so results do not
        // depend on worker scheduling.
        let scale = 1.0 / outs.len() as f32;
        let mut acc: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        for out in &outs {
            for (name, g) in &out.grads {
                match acc.get_mut(name) {
                    Some(a) => a.zip_mut_with(g, |a, &gv| *a += gv),
                    None => {
                        acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for (_, g) in acc.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }

        opt.step(params, &acc)?;
        for (label, key) in batch_keys {
            bank.enqueue(label, key)?;
        }
        teacher.update(params)?;
        *step_counter += 1;

        for out in &outs {
            stats.total += out.total;
            stats.cls += out.cls;
            stats.seg += out.seg;
            match out.cl {
                Some(v) => {
                    stats.cl += v;
                    stats.cl_active += 1;
                }
                None => stats.cl_skipped += 1,
            }
        }
    }

    let n = data.len() as f64;
    stats.total /= n;
    stats.cls /= n;
    stats.seg /= n;
    if stats.cl_active > 0 {
        stats.cl /= stats.cl_active as f64;
    }
    Ok(stats)
}

fn write_checkpoint(
    path: &Path,
    params: &ParamSet<f32>,
    teacher: &Teacher<f32>,
    bank: &MemoryBank<f32>,
    opt: &AdamW<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut all = params.clone();
    for (name, tensor) in teacher.params.iter() {
        all.insert(format!("teacher.{name}"), tensor.clone());
    }
    for (name, tensor) in opt.export_state() {
        all.insert(name, tensor);
    }
    for (name, tensor) in bank.snapshot() {
        all.insert(name, tensor);
    }
    checkpoint::save(path, &all, meta)
}

/// Load a checkpoint and keep only the student weights, dropping the teacher,
/// optimizer, and bank state that training archives alongside them.
pub fn load_model(path: &Path) -> Result<(ParamSet<f32>, CheckpointMeta)> {
    let (mut all, meta) = checkpoint::load(path)?;
    let _ = all.extract("teacher");
    let _ = all.extract("opt");
    let _ = all.extract("bank");
    Ok((all, meta))
}

/// Run both stages starting from the given weights. `out_dir` (when set)
/// receives `train_log.jsonl` plus stage-boundary and interval checkpoints.
pub fn train_from(
    mut params: ParamSet<f32>,
    train_data: &[PatientSample<f32>],
    val_data: Option<&[PatientSample<f32>]>,
    mrn_cfg: &MrnConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    mrn_cfg.validate()?;
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(MrnError::Config("training set is empty".into()));
    }
    if cfg.moco.proj.input_dim != ROI_COUNT * mrn_cfg.channel_dim() {
        return Err(MrnError::Config(format!(
            "projector reads {} features but the patient representation has {}",
            cfg.moco.proj.input_dim,
            ROI_COUNT * mrn_cfg.channel_dim()
        )));
    }

    let mut teacher = Teacher::new(&params, cfg.moco.momentum)?;
    let mut bank = MemoryBank::new(cfg.moco.bank_capacity, cfg.moco.proj.output_dim)?;
    let mut opt = AdamW::new(cfg.adamw, vec![])?;
    let config_hash = format!("{:016x}", hash_str(&format!("{mrn_cfg:?}|{cfg:?}")));

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| MrnError::io(dir.to_path_buf(), e))?;
            let path = dir.join("train_log.jsonl");
            let file = File::create(&path).map_err(|e| MrnError::io(path.clone(), e))?;
            Some((path, file))
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global_epoch = 0usize;
    let mut step_counter = 0usize;
    let lr = LrRecord { backbone: cfg.lr_backbone, heads: cfg.lr_heads };

    for (stage, stage_no, epochs) in [
        (Stage::Pretrain, 1u8, cfg.epochs_pretrain),
        (Stage::Finetune, 2u8, cfg.epochs_finetune),
    ] {
        opt.set_groups(make_param_groups(
            &params,
            stage,
            (cfg.lr_backbone, cfg.wd_backbone),
            (cfg.lr_heads, cfg.wd_heads),
        )?)?;
        let weights =
            LossWeights { lambda_seg: cfg.lambda_seg, lambda_cl: cfg.lambda_cl, stage };
        for _ in 0..epochs {
            let stats = run_epoch(
                train_data,
                mrn_cfg,
                cfg,
                &weights,
                global_epoch,
                &mut params,
                &mut teacher,
                &mut bank,
                &mut opt,
                &mut step_counter,
            )?;
            let val_metrics = match (val_data, cfg.eval_every) {
                (Some(v), Some(every)) if (global_epoch + 1) % every == 0 => {
                    Some(evaluate(&params, mrn_cfg, v)?)
                }
                _ => None,
            };
            let record = EpochRecord {
                epoch: global_epoch,
                stage: stage.as_str().to_string(),
                loss_total: stats.total,
                loss_cls: stats.cls,
                loss_seg: stats.seg,
                loss_cl: stats.cl,
                cl_active: stats.cl_active,
                cl_skipped: stats.cl_skipped,
                lr,
                val_metrics,
            };
            if let Some((path, file)) = log.as_mut() {
                let line = serde_json::to_string(&record)
                    .map_err(|e| MrnError::Data(format!("log record: {e}")))?;
                writeln!(file, "{line}").map_err(|e| MrnError::io(path.clone(), e))?;
                file.flush().map_err(|e| MrnError::io(path.clone(), e))?;
            }
            records.push(record);
            global_epoch += 1;
            if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
                if global_epoch % every == 0 {
                    let path = dir.join(format!("epoch_{global_epoch:04}.ckpt"));
                    let meta = CheckpointMeta::new(config_hash.clone(), global_epoch, stage_no);
                    write_checkpoint(&path, &params, &teacher, &bank, &opt, &meta)?;
                    checkpoints.push(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("stage{stage_no}.ckpt"));
            let meta = CheckpointMeta::new(config_hash.clone(), global_epoch, stage_no);
            write_checkpoint(&path, &params, &teacher, &bank, &opt, &meta)?;
            checkpoints.push(path);
        }
    }

    Ok(TrainOutcome { params, records, checkpoints })
}

/// Initialize from the seed and run both stages.
pub fn train(
    train_data: &[PatientSample<f32>],
    val_data: Option<&[PatientSample<f32>]>,
    mrn_cfg: &MrnConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let params = init_model::<f32>(mrn_cfg, &cfg.moco, cfg.seed)?;
    train_from(params, train_data, val_data, mrn_cfg, cfg, out_dir)
}

// ---- cross-validation, ensembling, masking study --------------------------------

/// Stratified fold assignments: per-class index lists are shuffled from the
/// seed's split stream and dealt round-robin, so folds are disjoint,
/// exhaustive, and balanced to within one sample per class.
pub fn kfold(labels: &[ClassLabel], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(MrnError::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    let mut per_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &label) in labels.iter().enumerate() {
        per_class[label.index()].push(i);
    }
    for (ci, idxs) in per_class.iter_mut().enumerate() {
        if idxs.len() < k {
            return Err(MrnError::Config(format!(
                "class {} has {} samples, fewer than {k} folds",
                ClassLabel::ALL[ci].as_str(),
                idxs.len()
            )));
        }
        idxs.shuffle(&mut derive_rng(seed, &[tag::SPLIT, ci as u64]));
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for idxs in &per_class {
        for (i, &idx) in idxs.iter().enumerate() {
            folds[i % k].push(idx);
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut val = folds[f].clone();
            val.sort_unstable();
            let mut tr: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            tr.sort_unstable();
            (tr, val)
        })
        .collect())
}

/// Arithmetic mean of per-model class probabilities.
pub fn ensemble_predict(
    models: &[&ParamSet<f32>],
    cfg: &MrnConfig,
    sample: &PatientSample<f32>,
) -> Result<[f64; 2]> {
    if models.is_empty() {
        return Err(MrnError::Config("ensemble needs at least one model".into()));
    }
    let mut acc = [0.0f64; 2];
    for model in models {
        let p = predict_probs(model, cfg, sample)?;
        acc[0] += p[0];
        acc[1] += p[1];
    }
    Ok([acc[0] / models.len() as f64, acc[1] / models.len() as f64])
}

/// One row of the masking study.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub metrics: MetricsReport,
}

/// Evaluate unmasked, then once per pattern with the named regions zeroed.
pub fn masking_ablation(
    params: &ParamSet<f32>,
    cfg: &MrnConfig,
    data: &[PatientSample<f32>],
    patterns: &[MaskPattern],
) -> Result<Vec<AblationRow>> {
    let mut rows = vec![AblationRow {
        setting: "baseline".to_string(),
        metrics: evaluate(params, cfg, data)?,
    }];
    for pattern in patterns {
        rows.push(AblationRow {
            setting: format!("mask:{pattern}"),
            metrics: evaluate_with_mask(params, cfg, data, Some(*pattern))?,
        });
    }
    Ok(rows)
}
