//! Supervised momentum contrastive pretraining: a projection head over the
//! patient representation, an InfoNCE-style loss whose keys come from a
//! momentum teacher, per-class FIFO memory banks, and the teacher update.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand_chacha::ChaCha12Rng;

use crate::error::{MrnError, Result};
use crate::mrn::ClassLabel;
use crate::params::{Binder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Tolerance on the unit-norm invariant of bank entries.
const NORM_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ProjConfig {
    /// Patient representation width (4C).
    pub input_dim: usize,
    /// Hidden width of the two-layer head.
    pub hidden_dim: usize,
    /// Projection dimension c.
    pub output_dim: usize,
}

impl ProjConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(MrnError::Config(format!(
                "projection dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn init_proj<T: Scalar>(params: &mut ParamSet<T>, rng: &mut ChaCha12Rng, cfg: &ProjConfig) {
    params.insert_linear(rng, "prj.fc1", cfg.input_dim, cfg.hidden_dim);
    params.insert_linear(rng, "prj.fc2", cfg.hidden_dim, cfg.output_dim);
}

/// Two-layer head with a rectifier between, L2-normalized to the unit
/// sphere. A representation that collapses to the zero vector has no
/// direction to normalize and is rejected.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    rep: Var,
) -> Result<Var> {
    let w1 = binder.bind(tape, params, "prj.fc1.w");
    let b1 = binder.bind(tape, params, "prj.fc1.b");
    let h = tape.matmul(rep, w1);
    let h = tape.add_rowvec(h, b1);
    let h = tape.relu(h);
    let w2 = binder.bind(tape, params, "prj.fc2.w");
    let b2 = binder.bind(tape, params, "prj.fc2.b");
    let pre = tape.matmul(h, w2);
    let pre = tape.add_rowvec(pre, b2);
    let norm = tape
        .value(pre)
        .iter()
        .map(|&x| {
            let x = x.to_f64_c();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm < 1e-12 {
        return Err(MrnError::Numeric(
            "projection collapsed to the zero vector; cannot normalize".into(),
        ));
    }
    Ok(tape.l2_normalize_rows(pre))
}

/// Read a `(1, c)` projection off the tape as a plain vector, for caching.
pub fn projection_value<T: Scalar>(tape: &Tape<T>, z: Var) -> Array1<T> {
    let v = tape.value(z);
    Array1::from_iter(v.iter().cloned())
}

/// InfoNCE over teacher keys: `-(1/|P|) Σ_p log( e^{z·p/τ} / (e^{z·p/τ} +
/// Σ_n e^{z·n/τ}) )`, evaluated with one shared log-sum-exp shift. Keys are
/// recorded as constants so gradients reach the anchor only.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    positives: &Array2<T>,
    negatives: &Array2<T>,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(MrnError::Config(format!("temperature must be positive, got {tau}")));
    }
    if positives.nrows() == 0 {
        return Err(MrnError::Config("contrastive loss needs at least one positive".into()));
    }
    let c = tape.value(anchor).shape()[1];
    if positives.ncols() != c || (negatives.nrows() > 0 && negatives.ncols() != c) {
        return Err(MrnError::Shape(format!(
            "anchor dim {c} vs keys {} / {}",
            positives.ncols(),
            negatives.ncols()
        )));
    }

    let keys_t = |m: &Array2<T>| {
        let t: Array2<T> = m.t().as_standard_layout().into_owned();
        t.into_dyn()
    };
    let pos_k = tape.constant(keys_t(positives));
    let pos_logits = tape.matmul(anchor, pos_k);
    let pos_logits = tape.scale(pos_logits, 1.0 / tau);

    let neg_logits = if negatives.nrows() > 0 {
        let neg_k = tape.constant(keys_t(negatives));
        let l = tape.matmul(anchor, neg_k);
        Some(tape.scale(l, 1.0 / tau))
    } else {
        None
    };

    // One shift covers every exponent in every per-positive denominator.
    let mut shift = f64::NEG_INFINITY;
    for &v in tape.value(pos_logits).iter() {
        shift = shift.max(v.to_f64_c());
    }
    if let Some(nl) = neg_logits {
        for &v in tape.value(nl).iter() {
            shift = shift.max(v.to_f64_c());
        }
    }

    let pos_shift = tape.add_scalar(pos_logits, -shift);
    let exp_pos = tape.exp(pos_shift);
    let denom = match neg_logits {
        Some(nl) => {
            let neg_shift = tape.add_scalar(nl, -shift);
            let exp_neg = tape.exp(neg_shift);
            let neg_sum = tape.sum_all(exp_neg);
            tape.add_scalar_var(exp_pos, neg_sum)
        }
        None => exp_pos,
    };
    let log_denom = tape.ln(denom);
    let terms = tape.sub(pos_shift, log_denom);
    let mean = tape.mean_all(terms);
    Ok(tape.neg(mean))
}

/// Momentum copy of the student parameters; forwards through it run with a
/// frozen binder so nothing is tracked for gradients.
#[derive(Clone, Debug)]
pub struct Teacher<T: Scalar> {
    pub params: ParamSet<T>,
    pub momentum: f64,
}

impl<T: Scalar> Teacher<T> {
    pub fn new(student: &ParamSet<T>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(MrnError::Config(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Teacher { params: student.clone(), momentum })
    }

    /// `θ_t ← m·θ_t + (1−m)·θ_s` elementwise over every tensor.
    pub fn update(&mut self, student: &ParamSet<T>) -> Result<()> {
        let names: Vec<String> = student.names().cloned().collect();
        if names.len() != self.params.names().count() {
            return Err(MrnError::Config(format!(
                "teacher tracks {} tensors, student has {}",
                self.params.names().count(),
                names.len()
            )));
        }
        let m = crate::scalar::c::<T>(self.momentum);
        let one_m = crate::scalar::c::<T>(1.0 - self.momentum);
        for name in &names {
            let s = student.get(name).expect("name from student");
            let t = self
                .params
                .get_mut(name)
                .ok_or_else(|| MrnError::Config(format!("teacher is missing {name}")))?;
            if t.shape() != s.shape() {
                return Err(MrnError::Config(format!(
                    "shape drift on {name}: teacher {:?} vs student {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
            t.mapv_inplace(|x| x * m);
            t.scaled_add(one_m, s);
        }
        Ok(())
    }
}

/// Per-class FIFO cache of teacher projections.
#[derive(Clone, Debug)]
pub struct MemoryBank<T: Scalar> {
    capacity: usize,
    dim: usize,
    rings: [VecDeque<Array1<T>>; 2],
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(MrnError::Config(format!(
                "bank needs positive capacity and dim, got {capacity}x{dim}"
            )));
        }
        Ok(MemoryBank { capacity, dim, rings: [VecDeque::new(), VecDeque::new()] })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, label: ClassLabel) -> usize {
        self.rings[label.index()].len()
    }

    pub fn is_empty(&self) -> bool {
        self.rings.iter().all(VecDeque::is_empty)
    }

    fn check_entry(&self, z: &Array1<T>) -> Result<()> {
        if z.len() != self.dim {
            return Err(MrnError::Shape(format!(
                "bank stores {}-dim keys, got {}",
                self.dim,
                z.len()
            )));
        }
        let norm = z.iter().map(|&x| x.to_f64_c().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(MrnError::Numeric(format!(
                "bank entries must be unit vectors, got norm {norm}"
            )));
        }
        Ok(())
    }

    /// Append one key, evicting the oldest entry of that class at capacity.
    pub fn enqueue(&mut self, label: ClassLabel, z: Array1<T>) -> Result<()> {
        self.check_entry(&z)?;
        let ring = &mut self.rings[label.index()];
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(z);
        Ok(())
    }

    /// Keys for one anchor: positives are every cached same-class entry plus
    /// the same-class teacher projections of the current batch (the anchor's
    /// own included); negatives are the other class's counterparts. Returns
    /// `None` when no positive exists anywhere (cold start — the caller
    /// skips this anchor's term and logs it).
    pub fn gather(
        &self,
        anchor: ClassLabel,
        batch: &[(ClassLabel, Array1<T>)],
    ) -> Option<(Array2<T>, Array2<T>)> {
        let stack = |label: ClassLabel| -> Array2<T> {
            let cached = self.rings[label.index()].iter();
            let fresh = batch.iter().filter(|(l, _)| *l == label).map(|(_, z)| z);
            let rows: Vec<&Array1<T>> = cached.chain(fresh).collect();
            let mut m = Array2::zeros((rows.len(), self.dim));
            for (i, r) in rows.iter().enumerate() {
                m.row_mut(i).assign(r);
            }
            m
        };
        let other = match anchor {
            ClassLabel::Hc => ClassLabel::Pd,
            ClassLabel::Pd => ClassLabel::Hc,
        };
        let positives = stack(anchor);
        if positives.nrows() == 0 {
            return None;
        }
        Some((positives, stack(other)))
    }

    /// Bank contents as named tensors, oldest entry first, for checkpoints.
    pub fn snapshot(&self) -> Vec<(String, ArrayD<T>)> {
        ClassLabel::ALL
            .iter()
            .map(|&label| {
                let ring = &self.rings[label.index()];
                let mut m = Array2::zeros((ring.len(), self.dim));
                for (i, r) in ring.iter().enumerate() {
                    m.row_mut(i).assign(r);
                }
                (format!("bank.{}", label.as_str()), m.into_dyn())
            })
            .collect()
    }

    /// Rebuild from snapshot tensors; rows arrive oldest-first.
    pub fn restore(capacity: usize, dim: usize, tensors: &[(String, ArrayD<T>)]) -> Result<Self> {
        let mut bank = MemoryBank::new(capacity, dim)?;
        for label in ClassLabel::ALL {
            let name = format!("bank.{}", label.as_str());
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| MrnError::Data(format!("snapshot is missing {name}")))?;
            let m = t
                .1
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| MrnError::Shape(format!("{name} must be a matrix")))?;
            if m.nrows() > capacity {
                return Err(MrnError::Data(format!(
                    "{name} holds {} rows, over capacity {capacity}",
                    m.nrows()
                )));
            }
            for row in m.axis_iter(Axis(0)) {
                bank.enqueue(label, row.to_owned())?;
            }
        }
        Ok(bank)
    }
}
