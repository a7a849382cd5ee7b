//! Training objectives: left-right label merging, weighted cross-entropy and
//! soft Dice over segmentation maps, diagnosis cross-entropy, and the staged
//! total that combines them.

use std::rc::Rc;

use ndarray::{Array3, ArrayD, IxDyn};

use crate::dpt::SegMap;
use crate::error::{MrnError, Result};
use crate::mrn::ClassLabel;
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};

/// Smoothing constant in the soft Dice denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Segmentation + contrastive objectives only.
    Pretrain,
    /// Full objective including the diagnosis term.
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_cl: f64,
    pub stage: Stage,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_seg < 0.0 || self.lambda_cl < 0.0 {
            return Err(MrnError::Config(format!(
                "loss weights must be nonnegative, got seg {} cl {}",
                self.lambda_seg, self.lambda_cl
            )));
        }
        Ok(())
    }
}

/// Relabel a grid through `table[raw] = merged`, collapsing left/right
/// nucleus pairs so mirror augmentation stays label-consistent. The table
/// must cover every id present and keep background at zero.
pub fn merge_lr_labels(grid: &Array3<u8>, table: &[u8]) -> Result<Array3<u8>> {
    if table.first() != Some(&0) {
        return Err(MrnError::Config("merge table must map background to background".into()));
    }
    let mut out = grid.clone();
    for v in out.iter_mut() {
        let raw = *v as usize;
        if raw >= table.len() {
            return Err(MrnError::Data(format!(
                "label id {raw} outside the merge table (len {})",
                table.len()
            )));
        }
        *v = table[raw];
    }
    Ok(out)
}

/// Per-image class weights: `w_k = 1 - count_k / total`.
pub fn wce_weights(grid: &Array3<u8>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in grid.iter() {
        let l = l as usize;
        if l >= num_classes {
            return Err(MrnError::Data(format!(
                "label {l} outside the {num_classes}-class space"
            )));
        }
        counts[l] += 1;
    }
    let total = grid.len() as f64;
    Ok(counts.iter().map(|&n| 1.0 - n as f64 / total).collect())
}

/// Flatten a segmentation map into `(D*H*W, K)` voxel rows.
fn segmap_rows<T: Scalar>(tape: &mut Tape<T>, map: &SegMap) -> Var {
    let hw = map.height * map.width;
    let rows: Vec<Var> = map
        .slices
        .iter()
        .map(|&s| {
            let flat = tape.reshape(s, &[map.classes, hw]);
            tape.transpose(flat)
        })
        .collect();
    tape.concat_rows(&rows)
}

fn check_target(map: &SegMap, target: &Array3<u8>) -> Result<()> {
    let want = (map.depth(), map.height, map.width);
    if target.dim() != want {
        return Err(MrnError::Shape(format!(
            "segmentation target {:?} does not match map {:?}",
            target.dim(),
            want
        )));
    }
    if let Some(&l) = target.iter().find(|&&l| (l as usize) >= map.classes) {
        return Err(MrnError::Data(format!(
            "target label {l} outside the {}-class map",
            map.classes
        )));
    }
    Ok(())
}

/// Mean over voxels of `-w_{y(v)} * log softmax(logits)_{y(v)}`.
pub fn weighted_ce<T: Scalar>(
    tape: &mut Tape<T>,
    map: &SegMap,
    target: &Array3<u8>,
    weights: &[f64],
) -> Result<Var> {
    check_target(map, target)?;
    if weights.len() != map.classes {
        return Err(MrnError::Shape(format!(
            "{} weights for a {}-class map",
            weights.len(),
            map.classes
        )));
    }
    let rows = segmap_rows(tape, map);
    let logp = tape.log_softmax_rows(rows);
    let idx: Vec<usize> = target.iter().map(|&l| l as usize).collect();
    let w_col = ArrayD::from_shape_fn(IxDyn(&[idx.len(), 1]), |ix| c::<T>(weights[idx[ix[0]]]));
    let picked = tape.gather_target(logp, Rc::new(idx));
    let weighted = tape.mul_const(picked, Rc::new(w_col));
    let mean = tape.mean_all(weighted);
    Ok(tape.neg(mean))
}

/// Soft Dice over softmax probabilities, averaged across foreground classes
/// present in the target (a class absent from the target is skipped; an
/// all-background target contributes zero).
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, map: &SegMap, target: &Array3<u8>) -> Result<Var> {
    check_target(map, target)?;
    let rows = segmap_rows(tape, map);
    let probs = tape.softmax_rows(rows);
    let n = target.len();
    let mut acc: Option<Var> = None;
    let mut present = 0usize;
    for k in 1..map.classes {
        let count = target.iter().filter(|&&l| l as usize == k).count();
        if count == 0 {
            continue;
        }
        present += 1;
        let onehot = ArrayD::from_shape_fn(IxDyn(&[n, 1]), |ix| {
            // Row order matches segmap_rows: depth-major, then row-major.
            if target.as_slice().expect("target is contiguous")[ix[0]] as usize == k {
                T::one()
            } else {
                T::zero()
            }
        });
        let p_k = tape.slice_cols(probs, k, k + 1);
        let overlap = tape.mul_const(p_k, Rc::new(onehot));
        let inter = tape.sum_all(overlap);
        let p_sum = tape.sum_all(p_k);
        let denom = tape.add_scalar(p_sum, count as f64 + DICE_EPS);
        let ratio = tape.div(inter, denom);
        let neg = tape.scale(ratio, -2.0);
        let term = tape.add_scalar(neg, 1.0);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    Ok(match acc {
        None => tape.constant(ArrayD::zeros(IxDyn(&[1]))),
        Some(a) if present > 1 => tape.scale(a, 1.0 / present as f64),
        Some(a) => a,
    })
}

/// Sum of weighted cross-entropy plus Dice over the active regions; masked
/// regions are skipped entirely.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &[SegMap],
    targets: &[&Array3<u8>],
    active: &[bool],
) -> Result<Var> {
    if maps.len() != targets.len() || maps.len() != active.len() {
        return Err(MrnError::Shape(format!(
            "{} maps, {} targets, {} flags",
            maps.len(),
            targets.len(),
            active.len()
        )));
    }
    if !active.iter().any(|&a| a) {
        return Err(MrnError::Config("segmentation loss needs at least one active region".into()));
    }
    let mut acc: Option<Var> = None;
    for ((map, target), _) in maps.iter().zip(targets).zip(active).filter(|(_, &a)| a) {
        let weights = wce_weights(target, map.classes)?;
        let wce = weighted_ce(tape, map, target, &weights)?;
        let dice = dice_loss(tape, map, target)?;
        let pair = tape.add(wce, dice);
        acc = Some(match acc {
            None => pair,
            Some(a) => tape.add(a, pair),
        });
    }
    Ok(acc.expect("at least one active region"))
}

/// Plain cross-entropy on `(1, 2)` diagnosis logits.
pub fn class_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, label: ClassLabel) -> Var {
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.gather_target(logp, Rc::new(vec![label.index()]));
    let mean = tape.mean_all(picked);
    tape.neg(mean)
}

/// Stage-weighted total: finetune adds the diagnosis term, pretrain leaves
/// it out; a missing contrastive term (cold bank) contributes nothing.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cls: Var,
    seg: Var,
    cl: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut total = tape.scale(seg, weights.lambda_seg);
    if let Some(cl) = cl {
        let cl_term = tape.scale(cl, weights.lambda_cl);
        total = tape.add(total, cl_term);
    }
    if weights.stage == Stage::Finetune {
        total = tape.add(total, cls);
    }
    Ok(total)
}
