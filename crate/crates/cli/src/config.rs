//! Layered run configuration: a TOML file (every key optional, unknown keys
//! rejected) over production-scale defaults, then command-line overrides,
//! resolved into the core config types. The resolved document is echoed into
//! each run directory so a run can be reproduced from its artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use mrn_core::dpt::{DptConfig, SelectionMode};
use mrn_core::encoder::{EncoderConfig, EncoderSource};
use mrn_core::fusion::FusionConfig;
use mrn_core::moco::ProjConfig;
use mrn_core::mrn::{canonical_specs, Modality, MrnConfig, ResConfig, RoiName, RoiSpec, ROI_COUNT};
use mrn_core::synth::{AugConfig, SynthConfig};
use mrn_core::train::{AdamwConfig, MocoConfig, TrainConfig};
use mrn_core::{MrnError, Result};
use serde::{Deserialize, Serialize};

/// Slice-encoder section. Defaults follow the production configuration:
/// ViT-B geometry (patch 14, width 768, 12 blocks of 12 heads) with four
/// register tokens and drop-path 0.2.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub patch_size: usize,
    pub channel_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_register_tokens: usize,
    pub drop_path_rate: f64,
    pub mlp_ratio: usize,
    /// "builtin" for the in-tree encoder, "adapter" to map pre-extracted
    /// per-slice features of width `external_width`.
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_width: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            patch_size: 14,
            channel_dim: 768,
            depth: 12,
            num_heads: 12,
            num_register_tokens: 4,
            drop_path_rate: 0.2,
            mlp_ratio: 4,
            source: "builtin".to_string(),
            external_width: None,
        }
    }
}

/// Fusion section: N alternating-attention layers, then M slice-fusion
/// layers. Drop-path defaults to 0 here; only the encoder rate is published.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub num_ffa_layers: usize,
    pub num_sfa_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            num_ffa_layers: 3,
            num_sfa_layers: 2,
            num_heads: 12,
            mlp_ratio: 4,
            drop_path_rate: 0.0,
        }
    }
}

/// Segmentation-decoder section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DptSection {
    /// "global" or "local": where the deepest feature slot is tapped.
    pub selection_mode: String,
    pub projection_channels: [usize; 4],
    pub fusion_channels: usize,
    /// Output classes per region, background included.
    pub num_classes: usize,
    /// Accept two-layer fusion stacks (toy scale) instead of requiring three.
    pub allow_short_trace: bool,
}

impl Default for DptSection {
    fn default() -> Self {
        DptSection {
            selection_mode: "local".to_string(),
            projection_channels: [96, 192, 384, 768],
            fusion_channels: 256,
            num_classes: 2,
            allow_short_trace: false,
        }
    }
}

/// One region override; when any `[[roi]]` table is present all four regions
/// must be listed in canonical order (nm, qsm1, qsm2, qsm3).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSection {
    pub name: String,
    pub modality: String,
    /// Crop size in voxels, (depth, height, width).
    pub crop: [usize; 3],
    /// Raw label ids the crop centers on.
    pub nuclei: Vec<u8>,
    pub resize_longest: usize,
}

/// Schedule and optimizer section. `eval_every` / `checkpoint_every` use 0
/// to mean "never".
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub wd_backbone: f64,
    pub lr_heads: f64,
    pub wd_heads: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_seg: f64,
    pub lambda_cl: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adamw = AdamwConfig::default();
        TrainSection {
            epochs_pretrain: 400,
            epochs_finetune: 200,
            batch_size: 4,
            lr_backbone: 1e-5,
            wd_backbone: 1e-1,
            lr_heads: 1e-4,
            wd_heads: 5e-2,
            beta1: adamw.beta1,
            beta2: adamw.beta2,
            eps: adamw.eps,
            lambda_seg: 1.0,
            lambda_cl: 1.0,
            seed: 1,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

/// Momentum-contrast section. `proj_hidden = 0` sizes the hidden layer to
/// the projector's input width (the patient representation, 4C).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoSection {
    pub tau: f64,
    pub momentum: f64,
    pub bank_capacity: usize,
    pub proj_hidden: usize,
    pub proj_output: usize,
}

impl Default for MocoSection {
    fn default() -> Self {
        MocoSection {
            tau: 0.1,
            momentum: 0.999,
            bank_capacity: 1024,
            proj_hidden: 0,
            proj_output: 128,
        }
    }
}

/// The full run document. Every command reads the same shape; each uses the
/// sections it needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dropout between the classification head's two layers.
    pub cls_dropout: f64,
    pub encoder: EncoderSection,
    pub fusion: FusionSection,
    pub dpt: DptSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi: Option<Vec<RoiSection>>,
    pub train: TrainSection,
    pub moco: MocoSection,
    pub augment: AugConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cls_dropout: 0.5,
            encoder: EncoderSection::default(),
            fusion: FusionSection::default(),
            dpt: DptSection::default(),
            roi: None,
            train: TrainSection::default(),
            moco: MocoSection::default(),
            augment: AugConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| MrnError::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| MrnError::Config(format!("config {}: {e}", path.display())))
}

fn parse_roi_name(s: &str) -> Result<RoiName> {
    RoiName::ALL
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| MrnError::Config(format!("unknown region name {s:?}")))
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "nm" => Ok(Modality::Nm),
        "qsm" => Ok(Modality::Qsm),
        other => Err(MrnError::Config(format!("unknown modality {other:?} (want nm or qsm)"))),
    }
}

fn parse_selection_mode(s: &str) -> Result<SelectionMode> {
    match s {
        "global" => Ok(SelectionMode::Global),
        "local" => Ok(SelectionMode::Local),
        other => Err(MrnError::Config(format!(
            "unknown selection mode {other:?} (want global or local)"
        ))),
    }
}

impl RunConfig {
    /// Build and validate the model configuration.
    pub fn resolve_model(&self) -> Result<MrnConfig> {
        let enc = &self.encoder;
        let source = match enc.source.as_str() {
            "builtin" => EncoderSource::Builtin,
            "adapter" => EncoderSource::Adapter {
                external_width: enc.external_width.ok_or_else(|| {
                    MrnError::Config("encoder.external_width is required for the adapter".into())
                })?,
            },
            other => {
                return Err(MrnError::Config(format!(
                    "unknown encoder source {other:?} (want builtin or adapter)"
                )))
            }
        };
        let encoder = EncoderConfig {
            patch_size: enc.patch_size,
            channel_dim: enc.channel_dim,
            depth: enc.depth,
            num_heads: enc.num_heads,
            num_register_tokens: enc.num_register_tokens,
            drop_path_rate: enc.drop_path_rate,
            mlp_ratio: enc.mlp_ratio,
            source,
        };
        encoder.validate()?;
        let fusion = FusionConfig {
            num_ffa_layers: self.fusion.num_ffa_layers,
            num_sfa_layers: self.fusion.num_sfa_layers,
            num_heads: self.fusion.num_heads,
            mlp_ratio: self.fusion.mlp_ratio,
            drop_path_rate: self.fusion.drop_path_rate,
        };
        let dpt = DptConfig {
            selection_mode: parse_selection_mode(&self.dpt.selection_mode)?,
            projection_channels: self.dpt.projection_channels,
            fusion_channels: self.dpt.fusion_channels,
            num_classes: self.dpt.num_classes,
            allow_short_trace: self.dpt.allow_short_trace,
            linear_mode: false,
        };
        let specs = self.resolve_specs()?;
        let cfg = MrnConfig {
            res: ResConfig { encoder, fusion, dpt },
            specs,
            cls_dropout: self.cls_dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_specs(&self) -> Result<[RoiSpec; ROI_COUNT]> {
        let Some(sections) = &self.roi else {
            return Ok(canonical_specs());
        };
        if sections.len() != ROI_COUNT {
            return Err(MrnError::Config(format!(
                "expected {ROI_COUNT} [[roi]] tables, found {}",
                sections.len()
            )));
        }
        let mut specs = Vec::with_capacity(ROI_COUNT);
        for sec in sections {
            specs.push(RoiSpec {
                name: parse_roi_name(&sec.name)?,
                source_modality: parse_modality(&sec.modality)?,
                crop_dims: (sec.crop[0], sec.crop[1], sec.crop[2]),
                nuclei: sec.nuclei.clone(),
                resize_longest: sec.resize_longest,
            });
        }
        specs.try_into().map_err(|_| MrnError::Config("region count drift".into()))
    }

    /// Build and validate the training configuration; needs the model for the
    /// projector's input width.
    pub fn resolve_train(&self, model: &MrnConfig) -> Result<TrainConfig> {
        let t = &self.train;
        let m = &self.moco;
        let input_dim = ROI_COUNT * model.channel_dim();
        let hidden_dim = if m.proj_hidden == 0 { input_dim } else { m.proj_hidden };
        let every = |v: usize| if v == 0 { None } else { Some(v) };
        let cfg = TrainConfig {
            epochs_pretrain: t.epochs_pretrain,
            epochs_finetune: t.epochs_finetune,
            batch_size: t.batch_size,
            lr_backbone: t.lr_backbone,
            wd_backbone: t.wd_backbone,
            lr_heads: t.lr_heads,
            wd_heads: t.wd_heads,
            adamw: AdamwConfig { beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            lambda_seg: t.lambda_seg,
            lambda_cl: t.lambda_cl,
            moco: MocoConfig {
                proj: ProjConfig { input_dim, hidden_dim, output_dim: m.proj_output },
                tau: m.tau,
                momentum: m.momentum,
                bank_capacity: m.bank_capacity,
            },
            augment: self.augment.clone(),
            seed: t.seed,
            eval_every: every(t.eval_every),
            checkpoint_every: every(t.checkpoint_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The synthesis section, validated.
    pub fn resolve_synth(&self) -> Result<SynthConfig> {
        self.synth.validate()?;
        Ok(self.synth.clone())
    }
}

/// Write the resolved document into the run directory and return its path.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| MrnError::Config(format!("config encode: {e}")))?;
    let path = dir.join("config.toml");
    fs::write(&path, text).map_err(|e| MrnError::io(&path, e))?;
    Ok(path)
}
