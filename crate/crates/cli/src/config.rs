//! The run configuration: one JSON document, optionally patched with
//! `--set key=value` overrides, validated before any stage starts.

use std::path::{Path, PathBuf};

use mobiforge_core::embedding::{AdaptConfig, AutoencoderTrainConfig, EncoderConfig};
use mobiforge_core::evaluation::{EprConfig, EvalConfig};
use mobiforge_core::generator::{GenTrainConfig, GeneratorConfig};
use mobiforge_core::planner::{PlannerTrainConfig, RemoteConfig};
use mobiforge_core::privacy::{LogisticConfig, MiaConfig, MlpConfig, ProbeConfig};
use mobiforge_core::trajectory::{SynthConfig, TimeSlotting};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable that replaces `planner.remote.url`.
pub const PLANNER_URL_ENV: &str = "MOBIFORGE_PLANNER_URL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic city recipe; `seed` and `slot_minutes` are taken from the
    /// `seeds` and `slotting` sections.
    pub city: SynthConfig,
    pub data: DataSection,
    pub slotting: SlottingSection,
    pub planner: PlannerSection,
    pub embedding: EmbeddingSection,
    pub generator: GeneratorSection,
    pub evaluation: EvaluationSection,
    pub privacy: PrivacySection,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            city: SynthConfig::new("synth", 60, 2500, 0),
            data: DataSection::default(),
            slotting: SlottingSection::default(),
            planner: PlannerSection::default(),
            embedding: EmbeddingSection::default(),
            generator: GeneratorSection::default(),
            evaluation: EvaluationSection::default(),
            privacy: PrivacySection::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Produced by `synth-data`.
    #[default]
    Synth,
    /// Produced by `partition` + `ingest` from the files below.
    Csv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Stay points (`agent_id,city_id,timestamp,region_id`).
    pub trajectories: Option<PathBuf>,
    /// Voronoi seeds (`lon,lat`).
    pub seeds: Option<PathBuf>,
    /// POI records used to derive region semantics.
    pub pois: Option<PathBuf>,
    /// Optional JSON object mapping agent ids to role names.
    pub roles: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlottingSection {
    pub slot_minutes: u32,
}

impl Default for SlottingSection {
    fn default() -> Self {
        Self { slot_minutes: 30 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerBackendKind {
    #[default]
    Neural,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub backend: PlannerBackendKind,
    pub train: PlannerTrainConfig,
    pub remote: RemoteConfig,
    /// Planned steps per generated trajectory.
    pub k: usize,
    pub dataset_tag: String,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            backend: PlannerBackendKind::Neural,
            train: PlannerTrainConfig::default(),
            remote: RemoteConfig::default(),
            k: 8,
            dataset_tag: "synthetic".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub encoder: EncoderConfig,
    pub train: AutoencoderTrainConfig,
    pub adapt: AdaptSection,
}

/// Target of `adapt-city`: either a synthetic recipe or a map plus trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub city: Option<SynthConfig>,
    pub map: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub train: AdaptConfig,
    /// Share of target trajectories kept out of adaptation for scoring.
    pub holdout: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            city: None,
            map: None,
            trajectories: None,
            train: AdaptConfig::default(),
            holdout: 0.5,
        }
    }
}

impl AdaptSection {
    pub fn is_configured(&self) -> bool {
        self.city.is_some() || self.map.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Plans rolled out by the trained planner from each training anchor.
    #[default]
    Planner,
    /// Plans read off the training trajectories themselves.
    Teacher,
    /// Uninformative plans (the unguided ablation).
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub model: GeneratorConfig,
    pub train: GenTrainConfig,
    pub conditions: ConditionKind,
    pub anchor_start: bool,
    /// Generated trajectories per test anchor.
    pub samples_per_anchor: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            model: GeneratorConfig::default(),
            train: GenTrainConfig::default(),
            conditions: ConditionKind::Planner,
            anchor_start: false,
            samples_per_anchor: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub metrics: EvalConfig,
    pub epr: EprConfig,
    /// Also score an EPR baseline started from the same anchors.
    pub epr_baseline: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            metrics: EvalConfig::default(),
            epr: EprConfig::default(),
            epr_baseline: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKind {
    #[default]
    Logistic,
    Mlp,
}

/// `seed` fields inside this section are replaced by values derived from
/// `seeds.audit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub attacker: AttackerKind,
    pub logistic: LogisticConfig,
    pub mlp: MlpConfig,
    pub mia: MiaConfig,
    pub probe: ProbeConfig,
    /// Synthetic-to-real mixing ratios for the utility probe.
    pub mix_ratios: Vec<f64>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            attacker: AttackerKind::Logistic,
            logistic: LogisticConfig::default(),
            mlp: MlpConfig::default(),
            mia: MiaConfig::default(),
            probe: ProbeConfig::default(),
            mix_ratios: vec![0.0, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub synth: u64,
    pub split: u64,
    pub planner: u64,
    pub embed: u64,
    pub adapt: u64,
    pub generator: u64,
    pub sample: u64,
    pub epr: u64,
    pub audit: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            synth: 1,
            split: 2,
            planner: 3,
            embed: 4,
            adapt: 5,
            generator: 6,
            sample: 7,
            epr: 8,
            audit: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of all stage directories; relative paths resolve against the
    /// current directory.
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn slotting(&self) -> Result<TimeSlotting, CliError> {
        TimeSlotting::new(self.slotting.slot_minutes)
            .map_err(|e| CliError::Config(format!("slotting.slot_minutes: {e}")))
    }

    /// The synthetic city recipe with the run-level seed and slotting applied.
    pub fn synth_config(&self) -> SynthConfig {
        let mut c = self.city.clone();
        c.seed = self.seeds.synth;
        c.slot_minutes = self.slotting.slot_minutes;
        c
    }

    /// Cross-section consistency checks that the schema cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, msg: String| Err(CliError::Config(format!("{path}: {msg}")));
        let spd = self.slotting()?.slots_per_day();
        if self.generator.model.slots_per_day != spd {
            return bad(
                "generator.model.slots_per_day",
                format!(
                    "{} does not match the {spd} slots implied by slotting.slot_minutes",
                    self.generator.model.slots_per_day
                ),
            );
        }
        if self.generator.model.latent_dim != self.embedding.encoder.out_dim {
            return bad(
                "generator.model.latent_dim",
                format!(
                    "{} must equal embedding.encoder.out_dim ({})",
                    self.generator.model.latent_dim, self.embedding.encoder.out_dim
                ),
            );
        }
        self.generator
            .model
            .dit
            .validate()
            .or_else(|e| bad("generator.model.dit", e.to_string()))?;
        self.generator
            .model
            .schedule
            .build()
            .map(|_| ())
            .or_else(|e| bad("generator.model.schedule", e.to_string()))?;
        self.embedding
            .encoder
            .validate()
            .or_else(|e| bad("embedding.encoder", e.to_string()))?;
        self.evaluation
            .metrics
            .validate()
            .or_else(|e| bad("evaluation.metrics", e.to_string()))?;
        if self.planner.k == 0 {
            return bad("planner.k", "must be positive".into());
        }
        if self.generator.samples_per_anchor == 0 {
            return bad("generator.samples_per_anchor", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.embedding.adapt.holdout) {
            return bad(
                "embedding.adapt.holdout",
                format!("{} is outside [0, 1)", self.embedding.adapt.holdout),
            );
        }
        if self.embedding.adapt.map.is_some() != self.embedding.adapt.trajectories.is_some() {
            return bad(
                "embedding.adapt",
                "`map` and `trajectories` must be given together".into(),
            );
        }
        if self.embedding.adapt.city.is_some() && self.embedding.adapt.map.is_some() {
            return bad(
                "embedding.adapt",
                "give either `city` or `map`/`trajectories`, not both".into(),
            );
        }
        if self.data.source == DataSource::Csv
            && (self.data.trajectories.is_none()
                || self.data.seeds.is_none()
                || self.data.pois.is_none())
        {
            return bad(
                "data",
                "source `csv` needs `trajectories`, `seeds` and `pois`".into(),
            );
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key, fully defaulted) JSON form,
    /// excluding `paths`, so that relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Applies one `key.sub=value` override. The value is parsed as JSON when
/// possible and taken as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("--set: malformed key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!(
                    "--set {key}: `{}` is not an object",
                    parts[..i].join(".")
                )));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

/// Parses a config tree; a schema violation reports the offending field path.
pub fn from_value(value: Value) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path`, applies the environment and `--set` overrides, and validates.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Ok(url) = std::env::var(PLANNER_URL_ENV) {
        apply_override(
            &mut value,
            &format!("planner.remote.url={}", Value::String(url)),
        )?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    from_value(value)
}
