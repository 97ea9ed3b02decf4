//! Experiment configuration: a TOML file plus `key.path=value` overrides,
//! resolved into validated sections and a content fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::ShuffleLimit;
use crate::encoder::{EncoderConfig, Family, FfMode, PeMode};
use crate::error::{Error, Result};
use crate::model::{Head, TaggerConfig};

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub target_train: Option<PathBuf>,
    #[serde(default)]
    pub target_test: Option<PathBuf>,
    #[serde(default)]
    pub vectors: Option<PathBuf>,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    /// Defaults to the family's convention when omitted.
    #[serde(default)]
    pub pe_mode: Option<PeMode>,
    #[serde(default)]
    pub ff_mode: Option<FfMode>,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    /// 0 means "match d_model".
    #[serde(default)]
    pub conv_channels: usize,
    #[serde(default = "default_clip_distance")]
    pub rpt_clip_distance: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default = "default_head")]
    pub head: Head,
    #[serde(default = "default_d_embed")]
    pub d_embed: usize,
    #[serde(default = "default_true")]
    pub freeze_embeddings: bool,
}

fn default_d_model() -> usize {
    64
}
fn default_num_heads() -> usize {
    4
}
fn default_num_layers() -> usize {
    2
}
fn default_kernel_size() -> usize {
    3
}
fn default_clip_distance() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}
fn default_max_positions() -> usize {
    512
}
fn default_head() -> Head {
    Head::Crf
}
fn default_d_embed() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl ModelSection {
    pub fn tagger_config(&self) -> TaggerConfig {
        let mut enc = EncoderConfig::for_family(self.family);
        enc.d_model = self.d_model;
        enc.num_heads = self.num_heads;
        enc.num_layers = self.num_layers;
        if let Some(pe) = self.pe_mode {
            enc.pe_mode = pe;
        }
        if let Some(ff) = self.ff_mode {
            enc.ff_mode = ff;
        }
        enc.kernel_size = self.kernel_size;
        enc.conv_channels = if self.conv_channels == 0 {
            self.d_model
        } else {
            self.conv_channels
        };
        enc.rpt_clip_distance = self.rpt_clip_distance;
        enc.dropout = self.dropout;
        enc.max_positions = self.max_positions;
        TaggerConfig {
            encoder: enc,
            head: self.head,
            d_embed: self.d_embed,
            freeze_embeddings: self.freeze_embeddings,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default)]
    pub copies: usize,
    #[serde(default = "default_limit")]
    pub k: ShuffleLimit,
}

fn default_limit() -> ShuffleLimit {
    ShuffleLimit::Unbounded
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection { copies: 0, k: default_limit() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fraction of the source training size drawn from target_train and
    /// mixed in; 0 reproduces the zero-shot setting exactly.
    #[serde(default)]
    pub fewshot_target_fraction: f64,
    #[serde(default)]
    pub augment: AugmentSection,
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    5
}
fn default_clip_norm() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    42
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            patience: default_patience(),
            clip_norm: default_clip_norm(),
            seed: default_seed(),
            fewshot_target_fraction: 0.0,
            augment: AugmentSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Displacement limits for the noisy copies of the test set.
    #[serde(default = "default_noisy")]
    pub noisy_ks: Vec<ShuffleLimit>,
    #[serde(default = "default_seed")]
    pub noise_seed: u64,
}

fn default_noisy() -> Vec<ShuffleLimit> {
    vec![ShuffleLimit::Finite(1), ShuffleLimit::Finite(2)]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { noisy_ks: default_noisy(), noise_seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: String,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spec_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported spec_version {:?}, this build understands {CONFIG_VERSION:?}",
                self.spec_version
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.train.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.fewshot_target_fraction) {
            return Err(Error::Config("fewshot_target_fraction must be in [0, 1]".into()));
        }
        if self.train.fewshot_target_fraction > 0.0 && self.data.target_train.is_none() {
            return Err(Error::Config(
                "fewshot_target_fraction > 0 requires data.target_train".into(),
            ));
        }
        // surface encoder problems at config time, not mid-run
        self.model.tagger_config().encoder.validate()?;
        Ok(())
    }

    /// Canonical TOML rendering; overrides and field order normalize away.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex chars of the sha-256 of the canonical form.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Set a dotted path in a TOML tree, creating intermediate tables.
pub fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Config("override has an empty key".into()));
    }
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("{} is not a table", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("loop always returns on the last part")
}

/// Apply one `key.path=value` override to a parsed TOML tree. The value is
/// parsed as TOML (so numbers, booleans, arrays, and quoted strings work);
/// anything that fails to parse is taken as a bare string.
pub fn apply_override(root: &mut toml::Value, setting: &str) -> Result<()> {
    let (path, raw) = setting.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {setting:?} must look like key.path=value"))
    })?;
    let path = path.trim();
    let raw = raw.trim();
    let value: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    set_path(root, path, value)
        .map_err(|e| Error::Config(format!("override {setting:?}: {e}")))
}

/// Parse config text, apply overrides in order, then deserialize and
/// validate. An override of `train.seed` loses to `seed_override`, which
/// carries the command line's --seed.
pub fn resolve(
    text: &str,
    overrides: &[String],
    seed_override: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut root: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
    for setting in overrides {
        apply_override(&mut root, setting)?;
    }
    if let Some(seed) = seed_override {
        apply_override(&mut root, &format!("train.seed={seed}"))?;
    }
    let config: ExperimentConfig = root
        .try_into()
        .map_err(|e| Error::Config(format!("bad config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn resolve_file(
    path: &Path,
    overrides: &[String],
    seed_override: Option<u64>,
) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    resolve(&text, overrides, seed_override)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
spec_version = "1"

[data]
train = "train.conll"
dev = "dev.conll"

[model]
family = "ort"
"#;

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let c = resolve(MINIMAL, &[], None).unwrap();
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.model.d_model, 64);
        let tc = c.model.tagger_config();
        assert_eq!(tc.encoder.conv_channels, 64, "0 means match d_model");
        assert_eq!(tc.encoder.pe_mode, PeMode::None, "family default");
        assert_eq!(tc.encoder.ff_mode, FfMode::Conv, "family default");
        assert!(tc.freeze_embeddings);
    }

    #[test]
    fn overrides_reach_nested_keys_with_types() {
        let overrides = vec![
            "train.epochs=3".to_string(),
            "model.dropout=0.0".to_string(),
            "train.augment.k=inf".to_string(),
            "eval.noisy_ks=[1, \"inf\"]".to_string(),
            "data.test=test.conll".to_string(),
        ];
        let c = resolve(MINIMAL, &overrides, None).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.dropout, 0.0);
        assert_eq!(c.train.augment.k, ShuffleLimit::Unbounded);
        assert_eq!(
            c.eval.noisy_ks,
            vec![ShuffleLimit::Finite(1), ShuffleLimit::Unbounded]
        );
        assert_eq!(c.data.test.as_deref(), Some(Path::new("test.conll")));
    }

    #[test]
    fn seed_flag_beats_config_and_set() {
        let c = resolve(MINIMAL, &["train.seed=7".into()], Some(13)).unwrap();
        assert_eq!(c.train.seed, 13);
        let c = resolve(MINIMAL, &["train.seed=7".into()], None).unwrap();
        assert_eq!(c.train.seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_versions_are_config_errors() {
        let bad = MINIMAL.replace("[model]", "typo_key = 1\n\n[model]");
        assert!(matches!(resolve(&bad, &[], None), Err(Error::Config(_))));

        let bad = MINIMAL.replace("spec_version = \"1\"", "spec_version = \"2\"");
        let err = resolve(&bad, &[], None).unwrap_err();
        assert!(err.to_string().contains("spec_version"));

        assert!(matches!(
            resolve(MINIMAL, &["nonsense".into()], None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve(MINIMAL, &["model.num_heads=3".into()], None),
            Err(Error::Config(_))
        ), "64 does not divide into 3 heads");
    }

    #[test]
    fn conventional_mode_names_are_accepted() {
        use crate::model::Head;
        let overrides = vec![
            "model.family=trs".to_string(),
            "model.pe_mode=sinusoid".to_string(),
            "model.head=linear".to_string(),
        ];
        let c = resolve(MINIMAL, &overrides, None).unwrap();
        assert_eq!(c.model.pe_mode, Some(PeMode::Sinusoidal));
        assert_eq!(c.model.head, Head::Softmax);

        let c = resolve(
            MINIMAL,
            &["model.family=trs".into(), "model.pe_mode=learned".into()],
            None,
        )
        .unwrap();
        assert_eq!(c.model.pe_mode, Some(PeMode::Learned));
    }

    #[test]
    fn fingerprint_tracks_content_not_formatting() {
        let a = resolve(MINIMAL, &[], None).unwrap();
        let spaced = MINIMAL.replace("family = \"ort\"", "family    =    \"ort\"");
        let b = resolve(&spaced, &[], None).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = resolve(MINIMAL, &["train.seed=1".into()], None).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn resolved_config_round_trips_through_canonical_form() {
        let c = resolve(MINIMAL, &["train.epochs=5".into()], Some(9)).unwrap();
        let again = resolve(&c.canonical_toml(), &[], None).unwrap();
        assert_eq!(again.train.epochs, 5);
        assert_eq!(again.train.seed, 9);
        assert_eq!(c.fingerprint(), again.fingerprint());
    }
}
