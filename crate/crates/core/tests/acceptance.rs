//! Acceptance suite: nine standalone checks covering gradient correctness,
//! attention locality, the contrastive and momentum machinery, metric
//! oracles, synthetic end-to-end training, the region-masking study,
//! determinism/round-trips, and stage isolation. Every tolerance is pinned
//! next to its assertion; each test prints one `[acceptance] … PASS` line
//! once its criterion holds.

use std::collections::VecDeque;
use std::time::Instant;

use mrn_core::blocks::Stoch;
use mrn_core::dpt::{DptConfig, SelectionMode};
use mrn_core::encoder::{EncoderConfig, EncoderSource};
use mrn_core::fusion::{ffa_global_sub, ffa_local_sub, init_fusion, FusionConfig, TokenField};
use mrn_core::gradcheck::{self, TOLERANCE};
use mrn_core::metrics;
use mrn_core::moco::{contrastive_loss, MemoryBank, Teacher};
use mrn_core::mrn::{
    canonical_specs, ClassLabel, MaskPattern, MrnConfig, PatientSample, ResConfig, RoiSpec,
    ROI_COUNT,
};
use mrn_core::rng::{derive_rng, tag};
use mrn_core::scalar::Scalar;
use mrn_core::synth::{
    generate_patient, load_manifest, load_sample, prepare_patient, write_dataset, AugConfig,
    ModalityGeometry, PairGeometry, SynthConfig,
};
use mrn_core::train::{
    evaluate, evaluate_segmentation, kfold, load_model, masking_ablation, predict_probs, train,
    AdamwConfig, MocoConfig, TrainConfig,
};
use mrn_core::{ParamSet, Tape};
use ndarray::{Array1, Array2};
use once_cell::sync::Lazy;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

// ---- shared synthetic-cohort helpers ----------------------------------------------

/// Region crops sized for 16-pixel resized slices (patch 4, quarter-res 4).
fn accept_specs() -> [RoiSpec; ROI_COUNT] {
    let mut specs = canonical_specs();
    specs[0].crop_dims = (4, 12, 24);
    specs[1].crop_dims = (6, 16, 16);
    specs[2].crop_dims = (4, 12, 16);
    specs[3].crop_dims = (4, 8, 16);
    for s in &mut specs {
        s.resize_longest = 16;
    }
    specs
}

/// Small paired-volume geometry with class signal planted in the NM pair and
/// the second QSM pair (the QSM2 region's nuclei).
fn accept_synth(num_patients: usize, seed: u64, signal_strength: f64) -> SynthConfig {
    SynthConfig {
        num_patients,
        class_balance: 0.5,
        nm: ModalityGeometry {
            dims: (8, 24, 40),
            background: 0.2,
            pairs: vec![PairGeometry {
                labels: (1, 2),
                center_zy: (0.5, 0.5),
                lateral_offset: 0.18,
                radii: (1.6, 2.5, 3.5),
                base_delta: 0.3,
                pd_delta: 0.28,
            }],
        },
        qsm: ModalityGeometry {
            dims: (10, 40, 56),
            background: 0.2,
            pairs: vec![
                PairGeometry {
                    labels: (1, 2),
                    center_zy: (0.5, 0.4),
                    lateral_offset: 0.2,
                    radii: (2.0, 4.0, 4.0),
                    base_delta: 0.25,
                    pd_delta: 0.0,
                },
                PairGeometry {
                    labels: (3, 4),
                    center_zy: (0.5, 0.55),
                    lateral_offset: 0.1,
                    radii: (1.6, 3.0, 3.5),
                    base_delta: 0.3,
                    pd_delta: 0.10,
                },
                PairGeometry {
                    labels: (5, 6),
                    center_zy: (0.5, 0.72),
                    lateral_offset: 0.14,
                    radii: (1.6, 2.5, 3.0),
                    base_delta: 0.28,
                    pd_delta: 0.0,
                },
            ],
        },
        signal_strength,
        center_jitter: 1.0,
        radius_jitter: 0.05,
        noise_sigma: 0.05,
        seed,
    }
}

fn synth_cohort(cfg: &SynthConfig, specs: &[RoiSpec; ROI_COUNT]) -> Vec<PatientSample<f32>> {
    (0..cfg.num_patients)
        .map(|i| {
            let gen = generate_patient(cfg, i).unwrap();
            prepare_patient(&gen, specs, 4).unwrap()
        })
        .collect()
}

// ---- criterion 1: gradient verification -------------------------------------------

#[test]
fn criterion_1_gradient_verification() {
    let start = Instant::now();
    let reports = gradcheck::run_suites(1, false).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    assert_eq!(reports.len(), 6);
    let names: Vec<&str> = reports.iter().map(|r| r.suite.as_str()).collect();
    assert_eq!(names, ["encoder", "ffa", "sfa", "dpt", "losses", "contrastive"]);
    for r in &reports {
        assert!(
            r.worst_rel <= TOLERANCE,
            "{}: worst relative error {:.3e} at {} exceeds {TOLERANCE:.0e}",
            r.suite,
            r.worst_rel,
            r.worst_at
        );
    }
    assert!(elapsed < 120.0, "gradient verification took {elapsed:.1}s, budget is 120s");
    println!(
        "[acceptance] criterion 1 (gradient verification, 6 suites <= {TOLERANCE:.0e}, \
         {elapsed:.1}s): PASS"
    );
}

// ---- criterion 2: attention locality / mixing --------------------------------------

#[test]
fn criterion_2_local_isolation_and_global_mixing() {
    const LEAK_TOL: f64 = 1e-9;
    const MIX_MIN: f64 = 1e-6;
    const TRIALS: usize = 100;
    let cdim = 8;
    let depth = 3;
    let l = 4;
    let cfg = FusionConfig {
        num_ffa_layers: 1,
        num_sfa_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        drop_path_rate: 0.0,
    };

    for trial in 0..TRIALS as u64 {
        let mut rng = derive_rng(2, &[tag::TEST, trial]);
        let mut params = ParamSet::<f64>::new();
        init_fusion(&mut params, &mut rng, &cfg, cdim, depth);

        let patches = Array2::from_shape_fn((depth * l, cdim), |_| f64::sample_normal(&mut rng));
        let slices = Array2::from_shape_fn((depth, cdim), |_| f64::sample_normal(&mut rng));
        let source = rng.random_range(0..depth);

        let mut perturbed_patches = patches.clone();
        let mut perturbed_slices = slices.clone();
        for r in source * l..(source + 1) * l {
            for c in 0..cdim {
                perturbed_patches[(r, c)] += f64::sample_normal(&mut rng);
            }
        }
        for c in 0..cdim {
            perturbed_slices[(source, c)] += f64::sample_normal(&mut rng);
        }

        let run = |p: &Array2<f64>, s: &Array2<f64>, local: bool| {
            let mut tape = Tape::<f64>::new();
            let mut binder = mrn_core::Binder::frozen();
            let field = TokenField {
                patches: tape.constant(p.clone().into_dyn()),
                slices: tape.constant(s.clone().into_dyn()),
                depth,
                tokens_per_slice: l,
            };
            let out = if local {
                ffa_local_sub(
                    &mut tape,
                    &mut binder,
                    &params,
                    &cfg,
                    "ffa0.loc",
                    field,
                    &mut Stoch::Eval,
                )
            } else {
                ffa_global_sub(
                    &mut tape,
                    &mut binder,
                    &params,
                    &cfg,
                    "ffa0.glob",
                    field,
                    &mut Stoch::Eval,
                )
            };
            (tape.value(out.patches).clone(), tape.value(out.slices).clone())
        };

        // Local sub-block: every other slice's tokens are untouched.
        let (base_p, base_s) = run(&patches, &slices, true);
        let (pert_p, pert_s) = run(&perturbed_patches, &perturbed_slices, true);
        for i in (0..depth).filter(|&i| i != source) {
            let mut leak = 0.0f64;
            for r in i * l..(i + 1) * l {
                for c in 0..cdim {
                    leak = leak.max((base_p[[r, c]] - pert_p[[r, c]]).abs());
                }
            }
            for c in 0..cdim {
                leak = leak.max((base_s[[i, c]] - pert_s[[i, c]]).abs());
            }
            assert!(
                leak <= LEAK_TOL,
                "trial {trial}: local sub-block leaked {leak:.3e} from slice {source} into {i}"
            );
        }

        // Global sub-block: some other slice's tokens must move.
        let (base_p, _) = run(&patches, &slices, false);
        let (pert_p, _) = run(&perturbed_patches, &perturbed_slices, false);
        let probe = (source + 1) % depth;
        let mut moved = 0.0f64;
        for r in probe * l..(probe + 1) * l {
            for c in 0..cdim {
                moved = moved.max((base_p[[r, c]] - pert_p[[r, c]]).abs());
            }
        }
        assert!(
            moved > MIX_MIN,
            "trial {trial}: global sub-block moved slice {probe} by only {moved:.3e}"
        );
    }
    println!(
        "[acceptance] criterion 2 (local leakage <= {LEAK_TOL:.0e}, global mixing > \
         {MIX_MIN:.0e}, {TRIALS} trials each): PASS"
    );
}

// ---- criterion 3: contrastive oracle ------------------------------------------------

fn unit_rows(rng: &mut ChaCha12Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, dim), |_| f64::sample_normal(rng));
    for mut r in m.rows_mut() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        r.mapv_inplace(|v| v / norm);
    }
    m
}

#[test]
fn criterion_3_contrastive_matches_literal_oracle() {
    const ORACLE_TOL: f64 = 1e-9;
    const INSTANCES: u64 = 1000;
    let mut edge_no_negatives = 0usize;
    let mut edge_single_positive = 0usize;

    for k in 0..INSTANCES {
        let mut rng = derive_rng(3, &[tag::TEST, k]);
        let dim = 2 + (k as usize % 15);
        let p_count = if k % 7 == 0 { 1 } else { 1 + rng.random_range(0..6) };
        let n_count = if k % 10 == 0 { 0 } else { rng.random_range(0..9) };
        let tau = 0.05 + 0.95 * rng.random::<f64>();

        let anchor = unit_rows(&mut rng, 1, dim);
        let positives = unit_rows(&mut rng, p_count, dim);
        let negatives = unit_rows(&mut rng, n_count, dim);
        if n_count == 0 {
            edge_no_negatives += 1;
        }
        if p_count == 1 {
            edge_single_positive += 1;
        }

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(anchor.clone().into_dyn());
        let loss = contrastive_loss(&mut tape, a, &positives, &negatives, tau).unwrap();
        let got = *tape.value(loss).iter().next().unwrap();

        // Literal term-by-term evaluation: -(1/|P|) sum_p log(e^{a.p/tau} /
        // (e^{a.p/tau} + sum_n e^{a.n/tau})).
        let dot = |row: ndarray::ArrayView1<f64>| -> f64 {
            row.iter().zip(anchor.row(0).iter()).map(|(x, a)| x * a).sum()
        };
        let neg_sum: f64 = negatives.rows().into_iter().map(|n| (dot(n) / tau).exp()).sum();
        let want = -positives
            .rows()
            .into_iter()
            .map(|p| {
                let e = (dot(p) / tau).exp();
                (e / (e + neg_sum)).ln()
            })
            .sum::<f64>()
            / p_count as f64;

        assert!(
            (got - want).abs() <= ORACLE_TOL,
            "instance {k}: loss {got} vs oracle {want} (|P|={p_count}, |N|={n_count}, tau={tau})"
        );
    }
    assert!(edge_no_negatives > 0 && edge_single_positive > 0);
    println!(
        "[acceptance] criterion 3 (contrastive oracle <= 1e-9 over {INSTANCES} instances, \
         {edge_no_negatives} with empty negatives, {edge_single_positive} with one positive): PASS"
    );
}

// ---- criterion 4: momentum update and bank FIFO -------------------------------------

fn small_param_set(seed: u64) -> ParamSet<f64> {
    let mut rng = derive_rng(seed, &[tag::INIT, 0]);
    let mut p = ParamSet::new();
    p.insert_trunc_normal(&mut rng, "a", &[3, 4], 1.0);
    p.insert_trunc_normal(&mut rng, "b", &[5], 1.0);
    p
}

#[test]
fn criterion_4_momentum_and_bank_semantics() {
    const EXACT_TOL: f64 = 1e-12;

    // Spot values of the exponential moving average.
    for m in [0.0, 0.5, 0.999, 1.0] {
        let student0 = small_param_set(41);
        let student1 = small_param_set(42);
        let mut teacher = Teacher::new(&student0, m).unwrap();
        teacher.update(&student1).unwrap();
        for name in ["a", "b"] {
            let t = teacher.params.get(name).unwrap();
            let s0 = student0.get(name).unwrap();
            let s1 = student1.get(name).unwrap();
            for ((t, s0), s1) in t.iter().zip(s0.iter()).zip(s1.iter()) {
                let want = m * s0 + (1.0 - m) * s1;
                assert!((t - want).abs() <= EXACT_TOL, "m={m}: {t} vs {want}");
            }
        }
    }

    // Frozen student: the teacher-student gap contracts by exactly m.
    let student = small_param_set(43);
    let mut teacher = Teacher::new(&small_param_set(44), 0.9).unwrap();
    let gap = |t: &Teacher<f64>| -> f64 {
        ["a", "b"]
            .iter()
            .map(|n| {
                let tv = t.params.get(n).unwrap();
                let sv = student.get(n).unwrap();
                tv.iter().zip(sv.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut prev = gap(&teacher);
    for step in 0..50 {
        teacher.update(&student).unwrap();
        let now = gap(&teacher);
        if prev > 1e-6 {
            assert!(
                (now / prev - 0.9).abs() <= EXACT_TOL,
                "step {step}: contraction {:.15} is not the momentum",
                now / prev
            );
        }
        prev = now;
    }

    // FIFO equivalence against plain deques over 10,000 interleaved pushes.
    const OPS: usize = 10_000;
    let capacity = 7;
    let mut rng = derive_rng(45, &[tag::TEST]);
    let mut bank = MemoryBank::<f64>::new(capacity, 2).unwrap();
    let mut reference: [VecDeque<Array1<f64>>; 2] = [VecDeque::new(), VecDeque::new()];
    for op in 0..OPS {
        let label = if rng.random::<bool>() { ClassLabel::Pd } else { ClassLabel::Hc };
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let key = ndarray::arr1(&[theta.cos(), theta.sin()]);
        bank.enqueue(label, key.clone()).unwrap();
        let ring = &mut reference[label.index()];
        if ring.len() == capacity {
            ring.pop_front();
        }
        ring.push_back(key);

        for label in ClassLabel::ALL {
            assert_eq!(bank.len(label), reference[label.index()].len(), "op {op}");
        }
        if op % 250 == 0 || op == OPS - 1 {
            let snap = bank.snapshot();
            for (label, (_, tensor)) in ClassLabel::ALL.iter().zip(&snap) {
                let ring = &reference[label.index()];
                let m = tensor.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                assert_eq!(m.nrows(), ring.len());
                for (row, want) in m.rows().into_iter().zip(ring.iter()) {
                    assert_eq!(row.to_owned(), *want, "op {op}: FIFO order drifted");
                }
            }
        }
    }
    println!(
        "[acceptance] criterion 4 (momentum spot values, contraction factor within 1e-12, \
         FIFO parity over {OPS} ops): PASS"
    );
}

// ---- criterion 5: metric oracles -----------------------------------------------------

#[test]
fn criterion_5_metric_oracles() {
    const AUC_TOL: f64 = 1e-12;

    // Rank-sum AUC against the brute-force pairwise definition, with ties.
    for k in 0..100u64 {
        let mut rng = derive_rng(5, &[tag::TEST, k]);
        let n = 2 + rng.random_range(0..199);
        let levels = 1 + rng.random_range(0..8);
        let mut truths: Vec<ClassLabel> = (0..n)
            .map(|_| if rng.random::<bool>() { ClassLabel::Pd } else { ClassLabel::Hc })
            .collect();
        truths[0] = ClassLabel::Hc;
        truths[1] = ClassLabel::Pd;
        let scores: Vec<f64> =
            (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();

        let got = metrics::roc_auc(&scores, &truths).unwrap().unwrap();
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (sp, tp) in scores.iter().zip(&truths) {
            if *tp != ClassLabel::Pd {
                continue;
            }
            for (sn, tn) in scores.iter().zip(&truths) {
                if *tn != ClassLabel::Hc {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        let want = wins / pairs;
        assert!((got - want).abs() <= AUC_TOL, "dataset {k}: {got} vs brute-force {want}");
    }

    // Five fixed fixtures with hand-computed confusion matrices. Probability
    // rows are (p_HC, p_PD); predictions are the argmax.
    let hc = ClassLabel::Hc;
    let pd = ClassLabel::Pd;
    struct Fixture {
        name: &'static str,
        probs: Vec<[f64; 2]>,
        truths: Vec<ClassLabel>,
        confusion: [[usize; 2]; 2],
        accuracy: f64,
        f1_macro: f64,
        auc: Option<f64>,
    }
    let fixtures = [
        Fixture {
            name: "perfect",
            probs: vec![[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]],
            truths: vec![hc, hc, pd, pd],
            confusion: [[2, 0], [0, 2]],
            accuracy: 1.0,
            f1_macro: 1.0,
            auc: Some(1.0),
        },
        Fixture {
            name: "inverted",
            probs: vec![[0.1, 0.9], [0.2, 0.8], [0.8, 0.2], [0.9, 0.1]],
            truths: vec![hc, hc, pd, pd],
            confusion: [[0, 2], [2, 0]],
            accuracy: 0.0,
            f1_macro: 0.0,
            auc: Some(0.0),
        },
        Fixture {
            // Everything called PD: 3 HC all wrong, 5 PD all right.
            // F1(HC) = 0, F1(PD) = 2*(5/8)/(5/8 + 1) = 10/13.
            name: "degenerate-pd",
            probs: vec![[0.4, 0.6]; 8],
            truths: vec![hc, hc, hc, pd, pd, pd, pd, pd],
            confusion: [[0, 3], [0, 5]],
            accuracy: 5.0 / 8.0,
            f1_macro: 5.0 / 13.0,
            auc: Some(0.5),
        },
        Fixture {
            // Confusion [[3,1],[2,4]]: acc 7/10, F1(HC) = 2/3, F1(PD) = 8/11.
            name: "mixed",
            probs: vec![
                [0.9, 0.1],
                [0.8, 0.2],
                [0.7, 0.3],
                [0.4, 0.6],
                [0.6, 0.4],
                [0.55, 0.45],
                [0.3, 0.7],
                [0.2, 0.8],
                [0.25, 0.75],
                [0.35, 0.65],
            ],
            truths: vec![hc, hc, hc, hc, pd, pd, pd, pd, pd, pd],
            confusion: [[3, 1], [2, 4]],
            accuracy: 0.7,
            f1_macro: (2.0 / 3.0 + 8.0 / 11.0) / 2.0,
            auc: Some(23.0 / 24.0),
        },
        Fixture {
            // Single-class truth: AUC undefined, F1(PD) vacuously 0.
            name: "single-class",
            probs: vec![[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]],
            truths: vec![hc, hc, hc],
            confusion: [[2, 1], [0, 0]],
            accuracy: 2.0 / 3.0,
            f1_macro: 0.4,
            auc: None,
        },
    ];
    for f in &fixtures {
        let report = metrics::report(&f.probs, &f.truths).unwrap();
        assert_eq!(report.confusion, f.confusion, "{}", f.name);
        assert!((report.accuracy - f.accuracy).abs() <= 1e-12, "{}", f.name);
        assert!((report.f1_macro - f.f1_macro).abs() <= 1e-12, "{}", f.name);
        match (report.roc_auc, f.auc) {
            (None, None) => {}
            (Some(got), Some(want)) => {
                assert!((got - want).abs() <= AUC_TOL, "{}: auc {got} vs {want}", f.name)
            }
            (got, want) => panic!("{}: auc {got:?} vs {want:?}", f.name),
        }
    }
    println!(
        "[acceptance] criterion 5 (AUC brute-force parity <= 1e-12 on 100 datasets, 5 \
         confusion fixtures): PASS"
    );
}

// ---- criteria 6 and 7: end-to-end training and the masking study --------------------

fn accept_mrn_config() -> MrnConfig {
    MrnConfig {
        res: ResConfig {
            encoder: EncoderConfig {
                patch_size: 4,
                channel_dim: 32,
                depth: 2,
                num_heads: 4,
                num_register_tokens: 1,
                drop_path_rate: 0.0,
                mlp_ratio: 2,
                source: EncoderSource::Builtin,
            },
            fusion: FusionConfig {
                num_ffa_layers: 2,
                num_sfa_layers: 1,
                num_heads: 4,
                mlp_ratio: 2,
                drop_path_rate: 0.0,
            },
            dpt: DptConfig {
                selection_mode: SelectionMode::Local,
                projection_channels: [8, 12, 16, 24],
                fusion_channels: 16,
                num_classes: 2,
                allow_short_trace: true,
                linear_mode: false,
            },
        },
        specs: accept_specs(),
        cls_dropout: 0.1,
    }
}

fn accept_train_config() -> TrainConfig {
    TrainConfig {
        epochs_pretrain: 30,
        epochs_finetune: 30,
        batch_size: 4,
        lr_backbone: 1e-4,
        wd_backbone: 1e-2,
        lr_heads: 1e-3,
        wd_heads: 5e-3,
        adamw: AdamwConfig::default(),
        lambda_seg: 1.0,
        lambda_cl: 1.0,
        moco: MocoConfig {
            proj: ProjConfig { input_dim: 128, hidden_dim: 64, output_dim: 16 },
            tau: 0.1,
            momentum: 0.99,
            bank_capacity: 64,
        },
        augment: AugConfig::disabled(),
        seed: 1,
        eval_every: None,
        checkpoint_every: None,
    }
}

use mrn_core::moco::ProjConfig;

struct EndToEnd {
    cfg: MrnConfig,
    params: ParamSet<f32>,
    heldout: Vec<PatientSample<f32>>,
    train_secs: f64,
    accuracy: f64,
    mean_dice: f64,
}

/// Generate 200 patients, hold out a stratified fifth, train 30+30 epochs.
fn run_pipeline(signal_strength: f64) -> EndToEnd {
    let cfg = accept_mrn_config();
    let tcfg = accept_train_config();
    let cohort = synth_cohort(&accept_synth(200, 11, signal_strength), &cfg.specs);
    let labels: Vec<ClassLabel> = cohort.iter().map(|s| s.label).collect();
    let (train_idx, val_idx) = kfold(&labels, 5, 31).unwrap().remove(0);
    assert_eq!(train_idx.len(), 160);
    assert_eq!(val_idx.len(), 40);
    let train_set: Vec<PatientSample<f32>> =
        train_idx.iter().map(|&i| cohort[i].clone()).collect();
    let heldout: Vec<PatientSample<f32>> = val_idx.iter().map(|&i| cohort[i].clone()).collect();

    let start = Instant::now();
    let outcome = train(&train_set, None, &cfg, &tcfg, None).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let report = evaluate(&outcome.params, &cfg, &heldout).unwrap();
    let seg = evaluate_segmentation(&outcome.params, &cfg, &heldout).unwrap();
    EndToEnd {
        cfg,
        params: outcome.params,
        heldout,
        train_secs,
        accuracy: report.accuracy,
        mean_dice: seg.mean_dice,
    }
}

static TRAINED: Lazy<EndToEnd> = Lazy::new(|| run_pipeline(1.0));

#[test]
fn criterion_6_synthetic_end_to_end() {
    let fixture = &*TRAINED;
    assert!(
        fixture.train_secs < 900.0,
        "training took {:.1}s, budget is 15 minutes",
        fixture.train_secs
    );
    assert!(
        fixture.accuracy >= 0.90,
        "held-out accuracy {:.3} below 0.90",
        fixture.accuracy
    );
    assert!(
        fixture.mean_dice >= 0.75,
        "held-out mean foreground Dice {:.3} below 0.75",
        fixture.mean_dice
    );

    // Zero class signal: the same pipeline must sit in the chance band.
    let null = run_pipeline(0.0);
    assert!(
        (0.40..=0.60).contains(&null.accuracy),
        "chance-band accuracy {:.3} outside [0.40, 0.60]",
        null.accuracy
    );
    println!(
        "[acceptance] criterion 6 (end-to-end: acc {:.3} >= 0.90, dice {:.3} >= 0.75, \
         {:.0}s < 900s, null acc {:.3} in [0.40, 0.60]): PASS",
        fixture.accuracy, fixture.mean_dice, fixture.train_secs, null.accuracy
    );
}

#[test]
fn criterion_7_masking_ablation_shape() {
    let fixture = &*TRAINED;
    let patterns = MaskPattern::all_patterns();
    let rows =
        masking_ablation(&fixture.params, &fixture.cfg, &fixture.heldout, &patterns).unwrap();
    assert_eq!(rows.len(), 17, "baseline plus 16 masking patterns");

    let baseline = rows[0].metrics.accuracy;
    let nm_only = rows
        .iter()
        .find(|r| r.setting == "mask:nm")
        .expect("single-region NM row")
        .metrics
        .accuracy;
    let all_four = rows
        .iter()
        .find(|r| r.setting == "mask:nm+qsm1+qsm2+qsm3")
        .expect("all-region row")
        .metrics
        .accuracy;

    assert!(
        baseline - nm_only >= 0.10,
        "masking NM dropped accuracy only {:.3} -> {:.3}",
        baseline,
        nm_only
    );
    assert!(
        (0.35..=0.65).contains(&all_four),
        "all-masked accuracy {:.3} outside [0.35, 0.65]",
        all_four
    );
    println!(
        "[acceptance] criterion 7 (17 rows; NM drop {:.3} >= 0.10; all-masked {:.3} in \
         [0.35, 0.65]): PASS",
        baseline - nm_only,
        all_four
    );
}

// ---- criterion 8: determinism and round-trips ---------------------------------------

fn small_mrn_config() -> MrnConfig {
    let mut cfg = accept_mrn_config();
    cfg.res.encoder.channel_dim = 8;
    cfg.res.encoder.num_heads = 2;
    cfg.res.encoder.depth = 1;
    cfg.res.dpt.projection_channels = [3, 4, 5, 6];
    cfg.res.dpt.fusion_channels = 6;
    cfg
}

fn small_train_config() -> TrainConfig {
    let mut cfg = accept_train_config();
    cfg.epochs_pretrain = 1;
    cfg.epochs_finetune = 1;
    cfg.batch_size = 2;
    cfg.moco.proj = ProjConfig { input_dim: 32, hidden_dim: 16, output_dim: 8 };
    cfg.moco.bank_capacity = 8;
    cfg.seed = 7;
    cfg
}

#[test]
fn criterion_8_determinism_and_round_trips() {
    let cfg = small_mrn_config();
    let tcfg = small_train_config();
    let cohort = synth_cohort(&accept_synth(12, 17, 1.0), &cfg.specs);

    // Same seed, same data: the loss curves agree within 1e-6 (they are in
    // fact bitwise equal; the tolerance is the one the contract names).
    let run_a = train(&cohort, None, &cfg, &tcfg, None).unwrap();
    let run_b = train(&cohort, None, &cfg, &tcfg, None).unwrap();
    assert_eq!(run_a.records.len(), run_b.records.len());
    for (a, b) in run_a.records.iter().zip(&run_b.records) {
        for (x, y) in [
            (a.loss_total, b.loss_total),
            (a.loss_cls, b.loss_cls),
            (a.loss_seg, b.loss_seg),
            (a.loss_cl, b.loss_cl),
        ] {
            assert!((x - y).abs() <= 1e-6, "loss curves drifted: {x} vs {y}");
        }
    }

    // Checkpoint round-trip: bitwise-identical evaluation.
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cohort, None, &cfg, &tcfg, Some(dir.path())).unwrap();
    let (reloaded, _) = load_model(&dir.path().join("stage2.ckpt")).unwrap();
    for sample in &cohort {
        let before = predict_probs(&out.params, &cfg, sample).unwrap();
        let after = predict_probs(&reloaded, &cfg, sample).unwrap();
        assert_eq!(before[0].to_bits(), after[0].to_bits(), "{}", sample.id);
        assert_eq!(before[1].to_bits(), after[1].to_bits(), "{}", sample.id);
    }
    let before = evaluate(&out.params, &cfg, &cohort).unwrap();
    let after = evaluate(&reloaded, &cfg, &cohort).unwrap();
    assert_eq!(before, after);

    // Dataset round-trip: written tensors reload bit-for-bit.
    let data_dir = tempfile::tempdir().unwrap();
    let synth_cfg = accept_synth(6, 23, 1.0);
    let manifest = write_dataset(&synth_cfg, &cfg.specs, 4, data_dir.path()).unwrap();
    let manifest_back = load_manifest(data_dir.path()).unwrap();
    assert_eq!(manifest, manifest_back);
    for (i, entry) in manifest.patients.iter().enumerate() {
        let direct = {
            let gen = generate_patient(&synth_cfg, i).unwrap();
            prepare_patient(&gen, &cfg.specs, 4).unwrap()
        };
        let loaded: PatientSample<f32> = load_sample(data_dir.path(), entry).unwrap();
        assert_eq!(loaded.label, direct.label);
        for (l, d) in loaded.rois.iter().zip(&direct.rois) {
            assert_eq!(l.labels, d.labels);
            assert_eq!(l.intensity.shape(), d.intensity.shape());
            for (a, b) in l.intensity.iter().zip(d.intensity.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
    println!(
        "[acceptance] criterion 8 (loss curves <= 1e-6, checkpoint and dataset round-trips \
         bitwise): PASS"
    );
}

// ---- criterion 9: stage isolation ---------------------------------------------------

#[test]
fn criterion_9_stage_one_leaves_classifier_untouched() {
    let cfg = small_mrn_config();
    let mut tcfg = small_train_config();
    tcfg.epochs_pretrain = 3;
    tcfg.epochs_finetune = 1;
    tcfg.checkpoint_every = Some(1);
    let cohort = synth_cohort(&accept_synth(8, 29, 1.0), &cfg.specs);

    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&cohort, None, &cfg, &tcfg, Some(dir.path())).unwrap();

    let reference = mrn_core::train::init_model::<f32>(&cfg, &tcfg.moco, tcfg.seed).unwrap();
    let cls_names: Vec<String> = reference
        .names()
        .filter(|n| n.starts_with("cls."))
        .cloned()
        .collect();
    assert!(!cls_names.is_empty());

    let mut stage1_checkpoints = 0usize;
    for path in &outcome.checkpoints {
        let (params, meta) = load_model(path).unwrap();
        if meta.stage != 1 {
            continue;
        }
        stage1_checkpoints += 1;
        for name in &cls_names {
            let got = params.get(name).unwrap();
            let want = reference.get(name).unwrap();
            for (a, b) in got.iter().zip(want.iter()) {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "{name} drifted in stage-1 checkpoint {}",
                    path.display()
                );
            }
        }
    }
    assert!(stage1_checkpoints >= 3, "expected every stage-1 epoch to checkpoint");
    println!(
        "[acceptance] criterion 9 (classifier bit-identical across {stage1_checkpoints} \
         stage-1 checkpoints): PASS"
    );
}
