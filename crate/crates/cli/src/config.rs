//! Experiment configuration: one TOML document whose keys are checked
//! strictly, plus the content hash the run ledger keys on.

use std::path::{Path, PathBuf};

use nopt_core::datamodel::ParamRange;
use nopt_core::finetune::InitMode;
use nopt_core::fno::FnoConfig;
use nopt_core::icl::SimilaritySource;
use nopt_core::pdegen::{NsSettings, Pde, RdSettings, Stage};
use nopt_core::pretrain::{BlurSpec, Granularity, MaskSpec, PretrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every artifact; stages write into named subfolders.
    pub output: PathBuf,
    pub pde: PdeBlock,
    #[serde(default)]
    pub generation: GenerationBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub pretrain: PretrainBlock,
    #[serde(default)]
    pub finetune: FinetuneBlock,
    #[serde(default)]
    pub icl: IclBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeBlock {
    pub name: Pde,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub ranges: StageRanges,
    #[serde(default)]
    pub rd: RdSettings,
    #[serde(default)]
    pub ns: NsSettings,
}

fn default_resolution() -> usize {
    64
}

/// Parameter ranges of the three stages; absent entries use the defaults of
/// the equation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRanges {
    pub pretrain: Option<ParamRange>,
    pub train: Option<ParamRange>,
    pub ood: Option<ParamRange>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationBlock {
    /// Unlabeled samples for pretraining.
    pub n: usize,
    /// Labeled samples for fine-tuning and testing.
    pub labeled_n: usize,
    /// Labeled out-of-distribution queries.
    pub ood_n: usize,
    pub seed: u64,
}

impl Default for GenerationBlock {
    fn default() -> Self {
        Self {
            n: 512,
            labeled_n: 96,
            ood_n: 16,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub width: usize,
    pub modes: usize,
    pub layers: usize,
    pub proj_hidden: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            width: 32,
            modes: 12,
            layers: 4,
            proj_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainBlock {
    pub mask_ratio: f64,
    /// Side of square mask patches; 0 masks single pixels.
    pub mask_patch: usize,
    pub blur_min: f64,
    pub blur_max: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainBlock {
    fn default() -> Self {
        Self {
            mask_ratio: 0.0,
            mask_patch: 0,
            blur_min: 0.0,
            blur_max: 1.0,
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneBlock {
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Any of `random`, `pretrained`, `frozen`.
    pub inits: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub rollout_steps: Option<usize>,
}

impl Default for FinetuneBlock {
    fn default() -> Self {
        Self {
            budgets: vec![16, 32, 64],
            seeds: vec![1, 2, 3],
            inits: vec!["random".into(), "pretrained".into()],
            epochs: 30,
            lr: 1e-3,
            test_fraction: 1.0 / 3.0,
            split_seed: 5,
            rollout_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IclBlock {
    pub demos: Vec<usize>,
    pub k: usize,
    pub sources: Vec<SimilaritySource>,
    pub seeds: Vec<u64>,
    pub chunk: usize,
}

impl Default for IclBlock {
    fn default() -> Self {
        Self {
            demos: vec![0, 4, 16, 32],
            k: 5,
            sources: SimilaritySource::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            chunk: 256,
        }
    }
}

/// Parses a TOML document; unknown or mistyped keys are reported with their
/// dotted path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner().message().trim()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    /// Defaults for `pde` writing under `output`.
    pub fn new(pde: Pde, output: impl Into<PathBuf>) -> Self {
        Self {
            output: output.into(),
            pde: PdeBlock {
                name: pde,
                resolution: default_resolution(),
                ranges: StageRanges::default(),
                rd: RdSettings::default(),
                ns: NsSettings::default(),
            },
            generation: GenerationBlock::default(),
            model: ModelBlock::default(),
            pretrain: PretrainBlock::default(),
            finetune: FinetuneBlock::default(),
            icl: IclBlock::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, why: &str| Err(CliError::Config(format!("{path}: {why}")));
        if self.pde.resolution < 8 || !self.pde.resolution.is_multiple_of(2) {
            return bad("pde.resolution", "must be even and at least 8");
        }
        for stage in [Stage::Pretrain, Stage::Train, Stage::Ood] {
            if self.range(stage).is_some_and(|r| r.is_empty()) {
                return bad(&format!("pde.ranges.{}", stage_name(stage)), "range is empty");
            }
        }
        if self.model.modes * 2 > self.pde.resolution {
            return bad("model.modes", "exceeds half the resolution");
        }
        for init in &self.finetune.inits {
            if !["random", "pretrained", "frozen"].contains(&init.as_str()) {
                return bad("finetune.inits", &format!("unknown init mode {init:?}"));
            }
        }
        if !(self.finetune.test_fraction > 0.0 && self.finetune.test_fraction < 1.0) {
            return bad("finetune.test_fraction", "must lie strictly between 0 and 1");
        }
        if self.icl.k == 0 {
            return bad("icl.k", "must be at least 1");
        }
        self.pretrain_config()
            .validate(self.pde.resolution, self.pde.resolution)
            .map_err(|e| CliError::Config(format!("pretrain: {e}")))
    }

    pub fn range(&self, stage: Stage) -> Option<ParamRange> {
        let r = &self.pde.ranges;
        let explicit = match stage {
            Stage::Pretrain => &r.pretrain,
            Stage::Train => &r.train,
            Stage::Ood => &r.ood,
        };
        explicit.clone().or_else(|| self.pde.name.default_range(stage))
    }

    /// Architecture before the time adapter fixes the channel counts.
    pub fn fno(&self, in_channels: usize, out_channels: usize) -> FnoConfig {
        FnoConfig {
            in_channels,
            out_channels,
            // The lift and head need at least as many channels as they map.
            width: self.model.width.max(in_channels).max(out_channels),
            modes1: self.model.modes,
            modes2: self.model.modes,
            layers: self.model.layers,
            proj_hidden: self.model.proj_hidden,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            mask: MaskSpec {
                ratio: p.mask_ratio,
                granularity: if p.mask_patch == 0 {
                    Granularity::Pixel
                } else {
                    Granularity::Patch(p.mask_patch)
                },
                fill: 0.0,
            },
            blur: BlurSpec::new(p.blur_min, p.blur_max),
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
            seed: p.seed,
            ..PretrainConfig::default()
        }
    }

    pub fn init_modes(&self, checkpoint: &Path) -> Vec<InitMode> {
        self.finetune
            .inits
            .iter()
            .map(|m| match m.as_str() {
                "pretrained" => InitMode::Pretrained(checkpoint.to_path_buf()),
                "frozen" => InitMode::Frozen(checkpoint.to_path_buf()),
                _ => InitMode::Random,
            })
            .collect()
    }

    /// Hash of the whole document.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Train => "train",
        Stage::Ood => "ood",
    }
}

/// SHA-256 of the canonical JSON form (object keys sorted), so the hash of a
/// parsed document ignores key order and whitespace.
pub fn content_hash(value: &impl Serialize) -> String {
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_vec(&v)).unwrap_or_default();
    bytes_hash(&canonical)
}

/// Hex SHA-256 of raw bytes.
pub fn bytes_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
