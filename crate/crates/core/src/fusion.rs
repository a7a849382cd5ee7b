//! Volume fusion: slice position embeddings, the feature-fusion attention
//! (FFA) stack that alternates global attention over all slices' tokens with
//! local per-slice attention, and the slice-token attention (SFA) stack that
//! refines a learned region token into the volume summary `t_roi`.
//!
//! Token layout: patch tokens live in one `(D*L, C)` matrix, slice-major
//! (rows `i*L .. (i+1)*L` belong to slice `i`); slice tokens are a separate
//! `(D, C)` matrix. The global sub-block attends over the concatenation of
//! both (`D*(L+1)` tokens); the local sub-block runs one shared-parameter
//! block per slice over that slice's `L+1` tokens.

use ndarray::{ArrayD, IxDyn};

use crate::blocks::{block_forward, init_block, Stoch};
use crate::encoder::SliceTokens;
use crate::error::{MrnError, Result};
use crate::params::{Binder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct FusionConfig {
    /// FFA layers N.
    pub num_ffa_layers: usize,
    /// SFA layers M.
    pub num_sfa_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ffa_layers == 0 {
            return Err(MrnError::Config("fusion needs at least one FFA layer".into()));
        }
        if self.num_sfa_layers == 0 {
            return Err(MrnError::Config("fusion needs at least one SFA layer".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(MrnError::Config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }
}

/// The state FFA transforms: all patch tokens plus per-slice summary tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenField {
    /// `(D*L, C)`, slice-major.
    pub patches: Var,
    /// `(D, C)`.
    pub slices: Var,
    pub depth: usize,
    pub tokens_per_slice: usize,
}

/// Patch-token snapshots taken after each sub-block of each FFA layer.
pub struct FfaTrace {
    /// After the global sub-block, one `(D*L, C)` snapshot per layer.
    pub globals: Vec<Var>,
    /// After the local sub-block, one `(D*L, C)` snapshot per layer.
    pub locals: Vec<Var>,
}

impl FfaTrace {
    pub fn num_layers(&self) -> usize {
        debug_assert_eq!(self.globals.len(), self.locals.len());
        self.globals.len()
    }
}

/// Register fusion parameters: the slice position table (sized to the
/// deepest configured region and sliced per volume), N FFA layers (separate
/// global/local blocks), the learned region token, and M SFA blocks.
pub fn init_fusion<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut rand_chacha::ChaCha12Rng,
    cfg: &FusionConfig,
    channel_dim: usize,
    max_depth: usize,
) {
    params.insert_trunc_normal(rng, "fus.slice_pos", &[max_depth, channel_dim], 0.02);
    let hidden = channel_dim * cfg.mlp_ratio;
    for i in 0..cfg.num_ffa_layers {
        init_block(params, rng, &format!("ffa{i}.glob"), channel_dim, hidden);
        init_block(params, rng, &format!("ffa{i}.loc"), channel_dim, hidden);
    }
    params.insert_trunc_normal(rng, "fus.roi_token", &[1, channel_dim], 0.02);
    for i in 0..cfg.num_sfa_layers {
        init_block(params, rng, &format!("sfa{i}"), channel_dim, hidden);
    }
}

/// Assemble the per-slice encoder outputs into a [`TokenField`].
pub fn token_field_from_slices<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[SliceTokens],
) -> Result<TokenField> {
    if outputs.is_empty() {
        return Err(MrnError::Data("token field needs at least one slice".into()));
    }
    let grid = outputs[0].grid;
    if outputs.iter().any(|o| o.grid != grid) {
        return Err(MrnError::Shape("slices disagree on patch grid".into()));
    }
    let patch_parts: Vec<Var> = outputs.iter().map(|o| o.patch).collect();
    let slice_parts: Vec<Var> = outputs.iter().map(|o| o.slice_token).collect();
    Ok(TokenField {
        patches: tape.concat_rows(&patch_parts),
        slices: tape.concat_rows(&slice_parts),
        depth: outputs.len(),
        tokens_per_slice: grid.0 * grid.1,
    })
}

/// Add the learned per-slice position row to every patch token of that slice.
/// Slice tokens are left untouched.
pub fn add_slice_positions<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    field: TokenField,
) -> Result<TokenField> {
    let table = binder.bind(tape, params, "fus.slice_pos");
    let capacity = tape.shape(table)[0];
    if field.depth > capacity {
        return Err(MrnError::Config(format!(
            "volume depth {} exceeds slice position table capacity {capacity}",
            field.depth
        )));
    }
    let rows = tape.slice_rows(table, 0, field.depth);
    // Broadcast row i over that slice's L patch rows: grid_positions with an
    // all-zero "column" table yields exactly pos[i] at row i*L + j.
    let cdim = tape.shape(table)[1];
    let zero_cols =
        tape.constant(ArrayD::zeros(IxDyn(&[field.tokens_per_slice, cdim])));
    let broadcast = tape.grid_positions(rows, zero_cols);
    Ok(TokenField {
        patches: tape.add(field.patches, broadcast),
        ..field
    })
}

/// Global sub-block: one pre-norm block over all `D*(L+1)` tokens jointly.
pub fn ffa_global_sub<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &FusionConfig,
    prefix: &str,
    field: TokenField,
    stoch: &mut Stoch<'_>,
) -> TokenField {
    let dl = field.depth * field.tokens_per_slice;
    let seq = tape.concat_rows(&[field.patches, field.slices]);
    let out = block_forward(tape, binder, params, prefix, seq, cfg.num_heads, stoch);
    TokenField {
        patches: tape.slice_rows(out, 0, dl),
        slices: tape.slice_rows(out, dl, dl + field.depth),
        ..field
    }
}

/// Local sub-block: D independent blocks (shared parameters), each over one
/// slice's `L` patch tokens plus its slice token.
pub fn ffa_local_sub<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &FusionConfig,
    prefix: &str,
    field: TokenField,
    stoch: &mut Stoch<'_>,
) -> TokenField {
    let l = field.tokens_per_slice;
    let mut patch_parts = Vec::with_capacity(field.depth);
    let mut slice_parts = Vec::with_capacity(field.depth);
    for i in 0..field.depth {
        let p = tape.slice_rows(field.patches, i * l, (i + 1) * l);
        let s = tape.slice_rows(field.slices, i, i + 1);
        let seq = tape.concat_rows(&[p, s]);
        let out = block_forward(tape, binder, params, prefix, seq, cfg.num_heads, stoch);
        patch_parts.push(tape.slice_rows(out, 0, l));
        slice_parts.push(tape.slice_rows(out, l, l + 1));
    }
    TokenField {
        patches: tape.concat_rows(&patch_parts),
        slices: tape.concat_rows(&slice_parts),
        ..field
    }
}

/// One FFA layer: global sub-block then local sub-block, returning the
/// patch-token snapshot after each.
pub fn ffa_layer<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &FusionConfig,
    layer: usize,
    field: TokenField,
    stoch: &mut Stoch<'_>,
) -> (TokenField, (Var, Var)) {
    let after_global = ffa_global_sub(
        tape,
        binder,
        params,
        cfg,
        &format!("ffa{layer}.glob"),
        field,
        stoch,
    );
    let after_local = ffa_local_sub(
        tape,
        binder,
        params,
        cfg,
        &format!("ffa{layer}.loc"),
        after_global,
        stoch,
    );
    (after_local, (after_global.patches, after_local.patches))
}

/// N sequential FFA layers; the trace records every sub-block snapshot.
pub fn ffa_stack<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &FusionConfig,
    mut field: TokenField,
    stoch: &mut Stoch<'_>,
) -> (TokenField, FfaTrace) {
    let mut trace = FfaTrace {
        globals: Vec::with_capacity(cfg.num_ffa_layers),
        locals: Vec::with_capacity(cfg.num_ffa_layers),
    };
    for layer in 0..cfg.num_ffa_layers {
        let (next, (g, l)) = ffa_layer(tape, binder, params, cfg, layer, field, stoch);
        field = next;
        trace.globals.push(g);
        trace.locals.push(l);
    }
    (field, trace)
}

/// Prepend the learned region token to the D slice tokens, run M pre-norm
/// blocks, and return the region-token position's output `t_roi` as `(1, C)`.
pub fn sfa_stack<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    params: &ParamSet<T>,
    cfg: &FusionConfig,
    slice_tokens: Var,
    stoch: &mut Stoch<'_>,
) -> Var {
    let roi = binder.bind(tape, params, "fus.roi_token");
    let mut seq = tape.concat_rows(&[roi, slice_tokens]);
    for i in 0..cfg.num_sfa_layers {
        seq = block_forward(tape, binder, params, &format!("sfa{i}"), seq, cfg.num_heads, stoch);
    }
    tape.slice_rows(seq, 0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::zero_output_projections;
    use crate::rng::{derive_rng, tag};
    use ndarray::{Array2, ArrayD, IxDyn};

    fn toy_cfg() -> FusionConfig {
        FusionConfig {
            num_ffa_layers: 2,
            num_sfa_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            drop_path_rate: 0.0,
        }
    }

    fn build(cfg: &FusionConfig, cdim: usize, max_depth: usize, seed: u64) -> ParamSet<f64> {
        let mut rng = derive_rng(seed, &[tag::INIT, 1]);
        let mut p = ParamSet::new();
        init_fusion(&mut p, &mut rng, cfg, cdim, max_depth);
        p
    }

    fn random_field(
        tape: &mut Tape<f64>,
        rng: &mut rand_chacha::ChaCha12Rng,
        d: usize,
        l: usize,
        cdim: usize,
    ) -> (TokenField, Array2<f64>, Array2<f64>) {
        let patches = Array2::from_shape_fn((d * l, cdim), |_| f64::sample_normal(rng));
        let slices = Array2::from_shape_fn((d, cdim), |_| f64::sample_normal(rng));
        let field = TokenField {
            patches: tape.constant(patches.clone().into_dyn()),
            slices: tape.constant(slices.clone().into_dyn()),
            depth: d,
            tokens_per_slice: l,
        };
        (field, patches, slices)
    }

    #[test]
    fn zero_position_table_leaves_field_unchanged() {
        let cfg = toy_cfg();
        let mut params = build(&cfg, 6, 4, 90);
        params.get_mut("fus.slice_pos").unwrap().fill(0.0);
        let mut tape = Tape::<f64>::new();
        let mut rng = derive_rng(91, &[tag::TEST]);
        let (field, patches, slices) = random_field(&mut tape, &mut rng, 3, 4, 6);
        let mut binder = Binder::trainable();
        let out = add_slice_positions(&mut tape, &mut binder, &params, field).unwrap();
        assert_eq!(*tape.value(out.patches), patches.into_dyn());
        assert_eq!(*tape.value(out.slices), slices.into_dyn());
    }

    #[test]
    fn position_rows_break_slice_permutation_symmetry() {
        let cfg = toy_cfg();
        let params = build(&cfg, 4, 4, 92); // nonzero random table, p0 != p1
        let mut rng = derive_rng(93, &[tag::TEST]);
        let l = 2;
        let patches = Array2::from_shape_fn((2 * l, 4), |_| f64::sample_normal(&mut rng));
        let mut swapped = patches.clone();
        for j in 0..l {
            for c in 0..4 {
                swapped[(j, c)] = patches[(l + j, c)];
                swapped[(l + j, c)] = patches[(j, c)];
            }
        }
        let run = |p: &Array2<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut binder = Binder::trainable();
            let field = TokenField {
                patches: tape.constant(p.clone().into_dyn()),
                slices: tape.constant(ArrayD::zeros(IxDyn(&[2, 4]))),
                depth: 2,
                tokens_per_slice: l,
            };
            let out = add_slice_positions(&mut tape, &mut binder, &params, field).unwrap();
            tape.value(out.patches).clone()
        };
        // swap-then-add vs add-then-swap differ when p0 != p1.
        let added_swapped = run(&swapped);
        let added = run(&patches);
        let mut add_then_swap = added.clone();
        for j in 0..l {
            for c in 0..4 {
                add_then_swap[[j, c]] = added[[l + j, c]];
                add_then_swap[[l + j, c]] = added[[j, c]];
            }
        }
        let diff: f64 = (&added_swapped - &add_then_swap).iter().map(|x| x.abs()).sum();
        assert!(diff > 1e-6, "positions must break permutation symmetry");
    }

    #[test]
    fn position_row_equal_to_negated_token_zeroes_it_and_capacity_is_enforced() {
        let cfg = toy_cfg();
        let mut params = build(&cfg, 3, 2, 94);
        let token = ndarray::arr1(&[0.5f64, -1.5, 2.0]);
        {
            let table = params.get_mut("fus.slice_pos").unwrap();
            for c in 0..3 {
                table[[0, c]] = -token[c];
            }
        }
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::trainable();
        let field = TokenField {
            patches: tape.constant(token.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
            slices: tape.constant(ArrayD::zeros(IxDyn(&[1, 3]))),
            depth: 1,
            tokens_per_slice: 1,
        };
        let out = add_slice_positions(&mut tape, &mut binder, &params, field).unwrap();
        for v in tape.value(out.patches).iter() {
            assert_eq!(*v, 0.0);
        }

        // Depth beyond the table is a configuration error.
        let deep = TokenField {
            patches: tape.constant(ArrayD::zeros(IxDyn(&[3, 3]))),
            slices: tape.constant(ArrayD::zeros(IxDyn(&[3, 3]))),
            depth: 3,
            tokens_per_slice: 1,
        };
        assert!(matches!(
            add_slice_positions(&mut tape, &mut binder, &params, deep),
            Err(MrnError::Config(_))
        ));
    }

    #[test]
    fn local_sub_block_is_exactly_slice_isolated_and_global_mixes() {
        let cfg = toy_cfg();
        let params = build(&cfg, 8, 4, 95);
        let (d, l, cdim) = (3usize, 4usize, 8usize);
        let mut rng = derive_rng(96, &[tag::TEST]);
        let base_p = Array2::from_shape_fn((d * l, cdim), |_| f64::sample_normal(&mut rng));
        let base_s = Array2::from_shape_fn((d, cdim), |_| f64::sample_normal(&mut rng));
        let mut pert_p = base_p.clone();
        let mut pert_s = base_s.clone();
        let j = 1usize; // perturbed slice
        for jj in 0..l {
            for c in 0..cdim {
                pert_p[(j * l + jj, c)] += f64::sample_normal(&mut rng);
            }
        }
        for c in 0..cdim {
            pert_s[(j, c)] += f64::sample_normal(&mut rng);
        }

        let run = |p: &Array2<f64>, s: &Array2<f64>, global: bool| {
            let mut tape = Tape::<f64>::new();
            let mut binder = Binder::trainable();
            let field = TokenField {
                patches: tape.constant(p.clone().into_dyn()),
                slices: tape.constant(s.clone().into_dyn()),
                depth: d,
                tokens_per_slice: l,
            };
            let out = if global {
                ffa_global_sub(&mut tape, &mut binder, &params, &cfg, "ffa0.glob", field, &mut Stoch::Eval)
            } else {
                ffa_local_sub(&mut tape, &mut binder, &params, &cfg, "ffa0.loc", field, &mut Stoch::Eval)
            };
            (tape.value(out.patches).clone(), tape.value(out.slices).clone())
        };

        let (lp_base, ls_base) = run(&base_p, &base_s, false);
        let (lp_pert, ls_pert) = run(&pert_p, &pert_s, false);
        for i in (0..d).filter(|i| *i != j) {
            for jj in 0..l {
                for c in 0..cdim {
                    let a = lp_base[[i * l + jj, c]];
                    let b = lp_pert[[i * l + jj, c]];
                    assert!(
                        (a - b).abs() <= 1e-9,
                        "local leak into slice {i} token {jj}: {a} vs {b}"
                    );
                }
            }
            for c in 0..cdim {
                assert!((ls_base[[i, c]] - ls_pert[[i, c]]).abs() <= 1e-9);
            }
        }

        let (gp_base, _) = run(&base_p, &base_s, true);
        let (gp_pert, _) = run(&pert_p, &pert_s, true);
        let mut max_change = 0.0f64;
        for i in (0..d).filter(|i| *i != j) {
            for jj in 0..l {
                for c in 0..cdim {
                    max_change =
                        max_change.max((gp_base[[i * l + jj, c]] - gp_pert[[i * l + jj, c]]).abs());
                }
            }
        }
        assert!(max_change > 1e-6, "global sub-block should mix slices, got {max_change}");
    }

    #[test]
    fn single_slice_global_and_local_coincide_under_shared_parameters() {
        let cfg = toy_cfg();
        let mut params = build(&cfg, 6, 2, 97);
        // Copy the global block's parameters over the local block's.
        let glob: Vec<(String, ArrayD<f64>)> = params
            .iter()
            .filter(|(k, _)| k.starts_with("ffa0.glob."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (k, v) in glob {
            let loc_name = k.replace("ffa0.glob.", "ffa0.loc.");
            *params.get_mut(&loc_name).unwrap() = v;
        }
        let mut tape = Tape::<f64>::new();
        let mut rng = derive_rng(98, &[tag::TEST]);
        let (field, _, _) = random_field(&mut tape, &mut rng, 1, 5, 6);
        let mut binder = Binder::trainable();
        let g = ffa_global_sub(&mut tape, &mut binder, &params, &cfg, "ffa0.glob", field, &mut Stoch::Eval);
        let l = ffa_local_sub(&mut tape, &mut binder, &params, &cfg, "ffa0.loc", field, &mut Stoch::Eval);
        let dp = (&*tape.value(g.patches) - &*tape.value(l.patches))
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let ds = (&*tape.value(g.slices) - &*tape.value(l.slices))
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(dp < 1e-12 && ds < 1e-12, "D=1 sub-blocks should coincide: {dp}, {ds}");
    }

    #[test]
    fn stack_records_n_by_two_snapshots_and_n1_equals_single_layer() {
        let mut cfg = toy_cfg();
        cfg.num_ffa_layers = 3;
        let params = build(&cfg, 4, 4, 99);
        let mut tape = Tape::<f64>::new();
        let mut rng = derive_rng(100, &[tag::TEST]);
        let (field, _, _) = random_field(&mut tape, &mut rng, 2, 3, 4);
        let mut binder = Binder::trainable();
        let (_, trace) = ffa_stack(&mut tape, &mut binder, &params, &cfg, field, &mut Stoch::Eval);
        assert_eq!(trace.num_layers(), 3);

        cfg.num_ffa_layers = 1;
        let params1 = build(&cfg, 4, 4, 99);
        let mut tape = Tape::<f64>::new();
        let (field, _, _) = random_field(&mut tape, &mut rng, 2, 3, 4);
        let mut b1 = Binder::trainable();
        let (stacked, _) = ffa_stack(&mut tape, &mut b1, &params1, &cfg, field, &mut Stoch::Eval);
        let mut b2 = Binder::trainable();
        let (single, _) = ffa_layer(&mut tape, &mut b2, &params1, &cfg, 0, field, &mut Stoch::Eval);
        assert_eq!(*tape.value(stacked.patches), *tape.value(single.patches));
        assert_eq!(*tape.value(stacked.slices), *tape.value(single.slices));
    }

    #[test]
    fn zeroed_output_projections_pass_field_through_and_return_roi_seed() {
        let cfg = toy_cfg();
        let mut params = build(&cfg, 6, 4, 101);
        for i in 0..cfg.num_ffa_layers {
            zero_output_projections(&mut params, &format!("ffa{i}.glob"));
            zero_output_projections(&mut params, &format!("ffa{i}.loc"));
        }
        for i in 0..cfg.num_sfa_layers {
            zero_output_projections(&mut params, &format!("sfa{i}"));
        }
        let mut tape = Tape::<f64>::new();
        let mut rng = derive_rng(102, &[tag::TEST]);
        let (field, patches, slices) = random_field(&mut tape, &mut rng, 2, 4, 6);
        let mut binder = Binder::trainable();
        let (out, _) = ffa_stack(&mut tape, &mut binder, &params, &cfg, field, &mut Stoch::Eval);
        assert_eq!(*tape.value(out.patches), patches.into_dyn());
        assert_eq!(*tape.value(out.slices), slices.into_dyn());

        let roi = sfa_stack(&mut tape, &mut binder, &params, &cfg, out.slices, &mut Stoch::Eval);
        let seed = params.expect("fus.roi_token");
        assert_eq!(*tape.value(roi), *seed, "t_roi must equal the learned seed");
    }

    #[test]
    fn sfa_produces_length_c_token_and_uses_every_block() {
        let mut cfg = toy_cfg();
        cfg.num_sfa_layers = 2;
        let params = build(&cfg, 6, 4, 103);
        let mut tape = Tape::<f64>::new();
        let mut rng = derive_rng(104, &[tag::TEST]);
        let slices = Array2::from_shape_fn((3, 6), |_| f64::sample_normal(&mut rng));
        let sv = tape.constant(slices.into_dyn());
        let mut binder = Binder::trainable();
        let roi = sfa_stack(&mut tape, &mut binder, &params, &cfg, sv, &mut Stoch::Eval);
        assert_eq!(tape.shape(roi), &[1, 6]);
        let bound: Vec<&String> = binder.bound_names().collect();
        assert!(bound.iter().any(|n| n.starts_with("sfa0.")));
        assert!(bound.iter().any(|n| n.starts_with("sfa1.")));
    }

    #[test]
    fn roi_token_permutation_sensitivity_tracks_position_table() {
        let cfg = FusionConfig { num_ffa_layers: 2, ..toy_cfg() };
        let (d, l, cdim) = (3usize, 2usize, 4usize);
        let mut rng = derive_rng(105, &[tag::TEST]);
        let patches = Array2::from_shape_fn((d * l, cdim), |_| f64::sample_normal(&mut rng));
        let slices = Array2::from_shape_fn((d, cdim), |_| f64::sample_normal(&mut rng));
        let perm = [2usize, 0, 1];
        let mut patches_perm = patches.clone();
        let mut slices_perm = slices.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for jj in 0..l {
                for c in 0..cdim {
                    patches_perm[(dst * l + jj, c)] = patches[(src * l + jj, c)];
                }
            }
            for c in 0..cdim {
                slices_perm[(dst, c)] = slices[(src, c)];
            }
        }

        // Pipeline: positions -> global-attention-only layers -> SFA.
        let run = |params: &ParamSet<f64>, p: &Array2<f64>, s: &Array2<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut binder = Binder::trainable();
            let field = TokenField {
                patches: tape.constant(p.clone().into_dyn()),
                slices: tape.constant(s.clone().into_dyn()),
                depth: d,
                tokens_per_slice: l,
            };
            let field =
                add_slice_positions(&mut tape, &mut binder, params, field).unwrap();
            let mut f = field;
            for i in 0..cfg.num_ffa_layers {
                f = ffa_global_sub(
                    &mut tape,
                    &mut binder,
                    params,
                    &cfg,
                    &format!("ffa{i}.glob"),
                    f,
                    &mut Stoch::Eval,
                );
            }
            let roi = sfa_stack(&mut tape, &mut binder, params, &cfg, f.slices, &mut Stoch::Eval);
            tape.value(roi).clone()
        };

        // Generic (not freshly-initialized-tiny) parameters: the 0.02-scale
        // init attenuates the positional signal below measurement after two
        // attention hops, so scale the random weights up to O(0.3).
        let mut params = build(&cfg, cdim, d, 106);
        for (name, t) in params.iter_mut() {
            if !name.contains(".ln") {
                t.mapv_inplace(|x| x * 15.0);
            }
        }
        let with_pos = run(&params, &patches, &slices);
        let with_pos_perm = run(&params, &patches_perm, &slices_perm);
        let change = (&with_pos - &with_pos_perm).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(change > 1e-6, "nonzero positions must make t_roi depth-sensitive");

        let mut params_zero = params.clone();
        params_zero.get_mut("fus.slice_pos").unwrap().fill(0.0);
        let no_pos = run(&params_zero, &patches, &slices);
        let no_pos_perm = run(&params_zero, &patches_perm, &slices_perm);
        let drift = (&no_pos - &no_pos_perm).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(
            drift <= 1e-6,
            "zero positions + global-only layers must be permutation invariant, drift {drift}"
        );
    }

    #[test]
    fn fusion_parameter_gradients_match_finite_differences() {
        // Documented instance: C=8, D=3, L=4, N=2, M=1, double precision.
        let cfg = FusionConfig {
            num_ffa_layers: 2,
            num_sfa_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            drop_path_rate: 0.0,
        };
        let (d, l, cdim) = (3usize, 4usize, 8usize);
        let params = build(&cfg, cdim, d, 107);
        let mut rng = derive_rng(108, &[tag::TEST]);
        let patches = Array2::from_shape_fn((d * l, cdim), |_| f64::sample_normal(&mut rng));
        let slices = Array2::from_shape_fn((d, cdim), |_| f64::sample_normal(&mut rng));
        let probe = std::rc::Rc::new(ArrayD::from_shape_fn(IxDyn(&[1, cdim]), |_| {
            f64::sample_normal(&mut rng)
        }));

        let run = |p: &ParamSet<f64>| -> (f64, Option<indexmap::IndexMap<String, ArrayD<f64>>>) {
            let mut tape = Tape::<f64>::new();
            let mut binder = Binder::trainable();
            let field = TokenField {
                patches: tape.constant(patches.clone().into_dyn()),
                slices: tape.constant(slices.clone().into_dyn()),
                depth: d,
                tokens_per_slice: l,
            };
            let field = add_slice_positions(&mut tape, &mut binder, p, field).unwrap();
            let (field, _) = ffa_stack(&mut tape, &mut binder, p, &cfg, field, &mut Stoch::Eval);
            let roi = sfa_stack(&mut tape, &mut binder, p, &cfg, field.slices, &mut Stoch::Eval);
            let weighted = tape.mul_const(roi, std::rc::Rc::clone(&probe));
            let loss = tape.sum_all(weighted);
            let lv = tape.value(loss)[0];
            let mut grads = tape.backward(loss);
            (lv, Some(binder.take_grads(&mut grads)))
        };

        let (_, grads) = run(&params);
        let grads = grads.unwrap();
        // Every fusion parameter participates (roi token via SFA, positions
        // via FFA -> slice tokens).
        assert!(grads.contains_key("fus.slice_pos"));
        assert!(grads.contains_key("fus.roi_token"));
        assert!(grads.contains_key("ffa1.loc.mlp.fc2.w"));

        let eps = 1e-5;
        for (name, g) in &grads {
            let base = params.expect(name).clone();
            let stride = (base.len() / 3).max(1);
            for flat in (0..base.len()).step_by(stride) {
                let mut pp = params.clone();
                pp.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] += eps;
                let (fp, _) = run(&pp);
                let mut pm = params.clone();
                pm.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] -= eps;
                let (fm, _) = run(&pm);
                let fd = (fp - fm) / (2.0 * eps);
                let an = g.as_standard_layout().as_slice().unwrap()[flat];
                // The 1e-7 floor absorbs central-difference roundoff on
                // near-zero gradients (noise ~ ulp(loss)/eps ~ 1e-11).
                let denom = an.abs().max(fd.abs()).max(1e-7);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "{name}[{flat}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}

