//! Double-precision central-difference verification of the analytic
//! gradients, one suite per differentiable component. Each suite builds a
//! scalar loss from a fixed input, backpropagates once, then probes a spread
//! of coordinates in the component's tensors with finite differences.

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD};
use serde::Serialize;

use crate::blocks::Stoch;
use crate::dpt::SegMap;
use crate::error::{MrnError, Result};
use crate::losses::{class_ce, dice_loss, wce_weights, weighted_ce};
use crate::mrn::{classify, init_classifier, init_mrn, res_forward, ClassLabel, MrnConfig};
use crate::moco::{contrastive_loss, init_proj, project, ProjConfig};
use crate::params::{Binder, ParamSet};
use crate::rng::{derive_rng, tag};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Largest allowed relative error between analytic and finite-difference
/// gradients.
pub const TOLERANCE: f64 = 1e-4;

/// Coordinates probed per tensor (spread evenly through the flat layout).
const PROBES_PER_TENSOR: usize = 6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub suite: String,
    /// Coordinates compared.
    pub checked: usize,
    pub worst_rel: f64,
    /// `tensor[flat_index]` of the worst coordinate.
    pub worst_at: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel.is_finite() && self.worst_rel <= TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &mut Binder, &ParamSet<f64>) -> Result<Var>>;

struct Suite {
    name: &'static str,
    /// Central-difference step; rectified paths get a smaller one.
    eps: f64,
    params: ParamSet<f64>,
    probes: Vec<&'static str>,
    build: Build,
}

fn scalar_value(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).iter().next().copied().unwrap_or(f64::NAN)
}

fn check_suite(suite: &Suite, corrupt: bool) -> Result<GradcheckReport> {
    let mut tape = Tape::<f64>::new();
    let mut binder = Binder::trainable();
    let root = (suite.build)(&mut tape, &mut binder, &suite.params)?;
    let mut grads = tape.backward(root);
    let mut analytic: IndexMap<String, ArrayD<f64>> = binder
        .take_grads(&mut grads)
        .into_iter()
        .map(|(n, g)| (n, g.as_standard_layout().into_owned()))
        .collect();
    if corrupt {
        if let Some(g) = analytic.get_mut(suite.probes[0]) {
            g.mapv_inplace(|x| x * 1.01 + 1e-3);
        }
    }

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::frozen();
        let root = (suite.build)(&mut tape, &mut binder, p)?;
        Ok(scalar_value(&tape, root))
    };

    let mut worst_rel = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    for &name in &suite.probes {
        let base = suite
            .params
            .get(name)
            .ok_or_else(|| MrnError::Config(format!("suite {} probes unknown tensor {name}", suite.name)))?;
        let len = base.len();
        let grad = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
        let grad = grad.as_standard_layout().into_owned();
        let gslice = grad.as_slice().expect("standard layout");
        let stride = (len / PROBES_PER_TENSOR).max(1);
        for i in (0..len).step_by(stride) {
            let mut shifted = suite.params.clone();
            shifted.get_mut(name).expect("probed above").as_slice_mut().expect("standard")[i] +=
                suite.eps;
            let up = eval(&shifted)?;
            shifted.get_mut(name).expect("probed above").as_slice_mut().expect("standard")[i] -=
                2.0 * suite.eps;
            let down = eval(&shifted)?;
            let fd = (up - down) / (2.0 * suite.eps);
            let a = gslice[i];
            // Relative above the floor, absolute below it: coordinates whose
            // true gradient sits near zero would otherwise amplify
            // finite-difference noise into spurious failures.
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(TOLERANCE);
            checked += 1;
            if !rel.is_finite() || rel > worst_rel {
                worst_rel = rel;
                worst_at = format!("{name}[{i}]");
            }
        }
    }
    Ok(GradcheckReport { suite: suite.name.to_string(), checked, worst_rel, worst_at })
}

fn toy_config() -> MrnConfig {
    use crate::dpt::{DptConfig, SelectionMode};
    use crate::encoder::{EncoderConfig, EncoderSource};
    use crate::fusion::FusionConfig;
    use crate::mrn::{canonical_specs, ResConfig};
    MrnConfig {
        res: ResConfig {
            encoder: EncoderConfig {
                patch_size: 7,
                channel_dim: 8,
                depth: 1,
                num_heads: 2,
                num_register_tokens: 1,
                drop_path_rate: 0.0,
                mlp_ratio: 2,
                source: EncoderSource::Builtin,
            },
            fusion: FusionConfig {
                num_ffa_layers: 2,
                num_sfa_layers: 1,
                num_heads: 2,
                mlp_ratio: 2,
                drop_path_rate: 0.0,
            },
            dpt: DptConfig {
                selection_mode: SelectionMode::Local,
                projection_channels: [3, 4, 5, 6],
                fusion_channels: 6,
                num_classes: 2,
                allow_short_trace: true,
                linear_mode: false,
            },
        },
        specs: canonical_specs(),
        cls_dropout: 0.0,
    }
}

fn random_volume(seed: u64, dims: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = derive_rng(seed, &[tag::INIT, 101]);
    Array3::from_shape_fn(dims, |_| f64::sample_uniform(&mut rng))
}

fn striped_target(dims: (usize, usize, usize)) -> Array3<u8> {
    Array3::from_shape_fn(dims, |(z, y, x)| u8::from((z + y / 3 + x / 5) % 2 == 1))
}

fn unit_rows(seed: u64, rows: usize, dim: usize) -> Array2<f64> {
    let mut rng = derive_rng(seed, &[tag::INIT, 103]);
    let mut m = Array2::from_shape_fn((rows, dim), |_| f64::sample_uniform(&mut rng) - 0.5);
    for mut r in m.rows_mut() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.mapv_inplace(|v| v / norm);
    }
    m
}

fn suites(seed: u64) -> Result<Vec<Suite>> {
    let cfg = toy_config();
    let mut net_params = ParamSet::<f64>::new();
    init_mrn(&mut net_params, &mut derive_rng(seed, &[tag::INIT]), &cfg)?;
    let volume = random_volume(seed, (3, 28, 28));

    let roi_mean = {
        let cfg = cfg.res.clone();
        let volume = volume.clone();
        move |tape: &mut Tape<f64>, binder: &mut Binder, p: &ParamSet<f64>| -> Result<Var> {
            let (_, roi) = res_forward(tape, binder, p, &cfg, &volume, false, &mut Stoch::Eval)?;
            Ok(tape.mean_all(roi))
        }
    };

    let seg_losses = {
        let cfg = cfg.res.clone();
        let volume = volume.clone();
        let target = striped_target((3, 28, 28));
        move |tape: &mut Tape<f64>, binder: &mut Binder, p: &ParamSet<f64>| -> Result<Var> {
            let (seg, _) = res_forward(tape, binder, p, &cfg, &volume, true, &mut Stoch::Eval)?;
            let map = seg.expect("segmentation requested");
            let weights = wce_weights(&target, map.classes)?;
            let wce = weighted_ce(tape, &map, &target, &weights)?;
            let dice = dice_loss(tape, &map, &target)?;
            Ok(tape.add(wce, dice))
        }
    };

    let mut loss_params = ParamSet::<f64>::new();
    {
        let mut rng = derive_rng(seed, &[tag::INIT, 7]);
        init_classifier(&mut loss_params, &mut rng, 8);
        loss_params.insert_trunc_normal(&mut rng, "seg.s0", &[2, 8, 8], 0.8);
        loss_params.insert_trunc_normal(&mut rng, "seg.s1", &[2, 8, 8], 0.8);
        loss_params.insert_trunc_normal(&mut rng, "rep", &[1, 32], 0.8);
    }
    let loss_build = {
        let target = striped_target((2, 8, 8));
        move |tape: &mut Tape<f64>, binder: &mut Binder, p: &ParamSet<f64>| -> Result<Var> {
            let s0 = binder.bind(tape, p, "seg.s0");
            let s1 = binder.bind(tape, p, "seg.s1");
            let map = SegMap { slices: vec![s0, s1], classes: 2, height: 8, width: 8 };
            let weights = wce_weights(&target, map.classes)?;
            let wce = weighted_ce(tape, &map, &target, &weights)?;
            let dice = dice_loss(tape, &map, &target)?;
            let rep = binder.bind(tape, p, "rep");
            let logits = classify(tape, binder, p, rep, 0.0, &mut Stoch::Eval);
            let ce = class_ce(tape, logits, ClassLabel::Pd);
            let seg = tape.add(wce, dice);
            Ok(tape.add(seg, ce))
        }
    };

    let mut cl_params = ParamSet::<f64>::new();
    {
        let mut rng = derive_rng(seed, &[tag::INIT, 9]);
        init_proj(
            &mut cl_params,
            &mut rng,
            &ProjConfig { input_dim: 32, hidden_dim: 16, output_dim: 8 },
        );
        cl_params.insert_trunc_normal(&mut rng, "rep", &[1, 32], 0.8);
    }
    let cl_build = {
        let positives = unit_rows(seed.wrapping_add(1), 2, 8);
        let negatives = unit_rows(seed.wrapping_add(2), 3, 8);
        move |tape: &mut Tape<f64>, binder: &mut Binder, p: &ParamSet<f64>| -> Result<Var> {
            let rep = binder.bind(tape, p, "rep");
            let z = project(tape, binder, p, rep)?;
            contrastive_loss(tape, z, &positives, &negatives, 0.1)
        }
    };

    Ok(vec![
        Suite {
            name: "encoder",
            eps: 1e-5,
            params: net_params.clone(),
            probes: vec![
                "enc.patch.w",
                "enc.patch.b",
                "enc.cls",
                "enc.pos.row",
                "enc.blk0.attn.wq.w",
                "enc.blk0.mlp.fc1.w",
                "enc.ln_f.g",
            ],
            build: Box::new(roi_mean.clone()),
        },
        Suite {
            name: "ffa",
            eps: 1e-5,
            params: net_params.clone(),
            probes: vec![
                "ffa0.glob.attn.wq.w",
                "ffa0.loc.attn.wv.w",
                "ffa0.glob.mlp.fc2.w",
                "ffa1.loc.attn.wo.w",
                "ffa1.glob.ln1.g",
                "fus.slice_pos",
            ],
            build: Box::new(roi_mean.clone()),
        },
        Suite {
            name: "sfa",
            eps: 1e-5,
            params: net_params.clone(),
            probes: vec![
                "sfa0.attn.wq.w",
                "sfa0.attn.wo.w",
                "sfa0.mlp.fc1.w",
                "sfa0.ln2.g",
                "fus.roi_token",
            ],
            build: Box::new(roi_mean),
        },
        Suite {
            name: "dpt",
            eps: 1e-6,
            params: net_params,
            probes: vec![
                "dpt.proj0.w",
                "dpt.proj3.w",
                "dpt.rn1.w",
                "dpt.rcu2.c1.w",
                "dpt.head.mid.w",
                "dpt.head.out.w",
                "dpt.head.out.b",
            ],
            build: Box::new(seg_losses),
        },
        Suite {
            name: "losses",
            eps: 1e-5,
            params: loss_params,
            probes: vec![
                "seg.s0",
                "seg.s1",
                "rep",
                "cls.fc1.w",
                "cls.fc1.b",
                "cls.fc2.w",
                "cls.fc2.b",
            ],
            build: Box::new(loss_build),
        },
        Suite {
            name: "contrastive",
            eps: 1e-6,
            params: cl_params,
            probes: vec!["rep", "prj.fc1.w", "prj.fc1.b", "prj.fc2.w", "prj.fc2.b"],
            build: Box::new(cl_build),
        },
    ])
}

/// Run all six component suites. With `corrupt` set, the first suite's first
/// analytic gradient is deliberately damaged so callers can verify that the
/// harness actually detects mismatches.
pub fn run_suites(seed: u64, corrupt: bool) -> Result<Vec<GradcheckReport>> {
    suites(seed)?
        .iter()
        .enumerate()
        .map(|(i, s)| check_suite(s, corrupt && i == 0))
        .collect()
}
