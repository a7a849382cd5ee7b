//! Named parameter storage and lazy binding of parameters onto a tape.
//!
//! A [`ParamSet`] is an ordered map from dotted names (`enc.blk0.attn.wq`,
//! `dpt.head.w`, ...) to tensors; insertion order is the canonical iteration
//! order everywhere (optimizer steps, checkpoints), which keeps training
//! bitwise deterministic.
//!
//! A [`Binder`] materializes parameters as tape variables on first use and
//! returns the same [`Var`] on every subsequent request within one forward
//! pass. Because the per-slice encoder weights are bound once and reused by
//! all region branches, gradient accumulation across shared uses falls out of
//! the tape with no extra bookkeeping. A frozen binder records constants
//! instead of leaves, which turns the whole forward pass into inference mode
//! (used for the momentum teacher and evaluation).

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

use crate::scalar::{c, Scalar};
use crate::tape::{Grads, Tape, Var};

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    tensors: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: IndexMap::new() }
    }

    /// Insert a tensor under a fresh name; duplicate names are a logic error.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    /// Like [`Self::get`] but panics with the missing name (programming error).
    pub fn expect(&self, name: &str) -> &ArrayD<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<T>> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn total_elems(&self) -> usize {
        self.tensors.values().map(|v| v.len()).sum()
    }

    /// Merge another set under a dotted prefix (checkpoint namespacing).
    pub fn adopt(&mut self, prefix: &str, other: ParamSet<T>) {
        for (name, value) in other.tensors {
            self.insert(format!("{prefix}.{name}"), value);
        }
    }

    /// Split out the subset under `prefix.`, stripping the prefix.
    pub fn extract(&mut self, prefix: &str) -> ParamSet<T> {
        let dot = format!("{prefix}.");
        let keys: Vec<String> =
            self.tensors.keys().filter(|k| k.starts_with(&dot)).cloned().collect();
        let mut out = ParamSet::new();
        for k in keys {
            let v = self.tensors.shift_remove(&k).expect("key listed above");
            out.insert(k[dot.len()..].to_string(), v);
        }
        out
    }

    /// Convert element type (f32 training state <-> f64 verification).
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.mapv(|x| c::<U>(x.to_f64_c())));
        }
        out
    }

    // ---- initialization helpers ------------------------------------------

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    /// Truncated-normal init (resample outside two standard deviations),
    /// the usual transformer weight init.
    pub fn insert_trunc_normal(
        &mut self,
        rng: &mut ChaCha12Rng,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
    ) {
        let stdt = c::<T>(std);
        let two = c::<T>(2.0);
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| loop {
            let x = T::sample_normal(rng);
            if x.abs() <= two {
                return x * stdt;
            }
        });
        self.insert(name, value);
    }

    /// Linear layer: `{prefix}.w` of shape `(fan_in, fan_out)` plus
    /// `{prefix}.b` zeros of shape `(fan_out,)`.
    pub fn insert_linear(
        &mut self,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) {
        self.insert_trunc_normal(rng, format!("{prefix}.w"), &[fan_in, fan_out], 0.02);
        self.insert_zeros(format!("{prefix}.b"), &[fan_out]);
    }

    /// Layer norm: unit gain `{prefix}.g` and zero bias `{prefix}.b`.
    pub fn insert_layer_norm(&mut self, prefix: &str, width: usize) {
        self.insert_ones(format!("{prefix}.g"), &[width]);
        self.insert_zeros(format!("{prefix}.b"), &[width]);
    }

    /// Square-kernel conv layer: `{prefix}.w` of shape `(c_out, c_in, k, k)`
    /// with He-style scale, plus `{prefix}.b` zeros.
    pub fn insert_conv(
        &mut self,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.insert_trunc_normal(rng, format!("{prefix}.w"), &[c_out, c_in, k, k], std);
        self.insert_zeros(format!("{prefix}.b"), &[c_out]);
    }
}

/// Lazily binds named parameters to tape variables, one `Var` per name.
pub struct Binder {
    vars: IndexMap<String, Var>,
    trainable: bool,
}

impl Binder {
    /// Parameters bound through this binder become gradient leaves.
    pub fn trainable() -> Self {
        Binder { vars: IndexMap::new(), trainable: true }
    }

    /// Parameters bound through this binder become constants (inference mode).
    pub fn frozen() -> Self {
        Binder { vars: IndexMap::new(), trainable: false }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Var for `name`, recording the parameter on first use.
    pub fn bind<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        name: &str,
    ) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = params.expect(name).clone();
        let v = if self.trainable { tape.leaf(value) } else { tape.constant(value) };
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Pull gradients for every bound parameter out of a backward pass,
    /// keyed by name, in first-use order. Parameters whose gradient did not
    /// materialize (dead branches) are omitted.
    pub fn take_grads<T: Scalar>(&self, grads: &mut Grads<T>) -> IndexMap<String, ArrayD<T>> {
        let mut out = IndexMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, tag};

    #[test]
    fn insertion_order_is_preserved_and_duplicates_panic() {
        let mut p = ParamSet::<f32>::new();
        p.insert_zeros("b.x", &[2]);
        p.insert_zeros("a.y", &[2]);
        p.insert_zeros("c.z", &[2]);
        let names: Vec<&String> = p.names().collect();
        assert_eq!(names, ["b.x", "a.y", "c.z"]);
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            p.insert_zeros("a.y", &[2]);
        }));
        assert!(caught.is_err(), "duplicate insert must panic");
    }

    #[test]
    fn trunc_normal_respects_bounds_and_scale() {
        let mut rng = derive_rng(3, &[tag::TEST, 30]);
        let mut p = ParamSet::<f64>::new();
        p.insert_trunc_normal(&mut rng, "w", &[200, 50], 0.02);
        let w = p.expect("w");
        let max = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max <= 0.04 + 1e-12, "sample outside two std devs: {max}");
        // A standard normal truncated at +-2 has std sqrt(1 - 4*phi(2)/(2*Phi(2)-1))
        // ~= 0.87962, so the samples should have std ~= 0.02 * 0.87962.
        let expect = 0.02 * 0.879_62;
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - expect).abs() < 0.0005, "std looks off: {}", var.sqrt());
    }

    #[test]
    fn adopt_extract_roundtrip_preserves_content() {
        let mut rng = derive_rng(3, &[tag::TEST, 31]);
        let mut inner = ParamSet::<f32>::new();
        inner.insert_linear(&mut rng, "lin", 4, 3);
        let copy = inner.clone();
        let mut outer = ParamSet::<f32>::new();
        outer.insert_zeros("other", &[1]);
        outer.adopt("opt.m", inner);
        assert!(outer.contains("opt.m.lin.w"));
        let back = outer.extract("opt.m");
        assert_eq!(back.len(), 2);
        assert_eq!(back.expect("lin.w"), copy.expect("lin.w"));
        assert!(!outer.contains("opt.m.lin.w"));
        assert!(outer.contains("other"));
    }

    #[test]
    fn binder_reuses_vars_and_accumulates_shared_gradients() {
        let mut rng = derive_rng(3, &[tag::TEST, 32]);
        let mut p = ParamSet::<f64>::new();
        p.insert_trunc_normal(&mut rng, "shared.w", &[3, 3], 0.5);
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::trainable();
        let a = binder.bind(&mut tape, &p, "shared.w");
        let b = binder.bind(&mut tape, &p, "shared.w");
        assert_eq!(a, b, "same name must bind to the same var");

        // Loss = sum(w) + sum(w*w): gradient must accumulate to 1 + 2w.
        let s1 = tape.sum_all(a);
        let sq = tape.mul(a, a);
        let s2 = tape.sum_all(sq);
        let loss = tape.add(s1, s2);
        let mut grads = tape.backward(loss);
        let got = binder.take_grads(&mut grads);
        let gw = got.get("shared.w").expect("gradient present");
        let w = p.expect("shared.w");
        for (g, x) in gw.iter().zip(w.iter()) {
            assert!((g - (1.0 + 2.0 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_binder_produces_no_gradients() {
        let mut p = ParamSet::<f64>::new();
        p.insert_ones("w", &[2, 2]);
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::frozen();
        let w = binder.bind(&mut tape, &p, "w");
        let x = tape.leaf(ArrayD::ones(IxDyn(&[2, 2])));
        let prod = tape.mul(w, x);
        let loss = tape.sum_all(prod);
        let mut grads = tape.backward(loss);
        assert!(grads.get(x).is_some());
        let got = binder.take_grads(&mut grads);
        assert!(got.is_empty(), "frozen params must not receive gradients");
    }

    #[test]
    fn cast_roundtrips_f32_values_exactly() {
        let mut rng = derive_rng(3, &[tag::TEST, 33]);
        let mut p = ParamSet::<f32>::new();
        p.insert_trunc_normal(&mut rng, "w", &[5, 5], 1.0);
        let back: ParamSet<f32> = p.cast::<f64>().cast::<f32>();
        assert_eq!(back.expect("w"), p.expect("w"));
    }
}
