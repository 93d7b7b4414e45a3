use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticTaskSpec;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::model::{ArchConfig, DecoderKind};
use crate::speedbench::SpeedConfig;
use crate::training::{Objective, TrainConfig};

/// Model family trained by the `train-nat` stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    At,
    Maskt,
    Glat,
}

impl ModelKind {
    pub fn objective(self) -> Objective {
        match self {
            ModelKind::At => Objective::At,
            ModelKind::Maskt => Objective::Cmlm,
            ModelKind::Glat => Objective::Glat,
        }
    }

    pub fn decoder(self) -> DecoderKind {
        match self {
            ModelKind::At => DecoderKind::At,
            ModelKind::Maskt | ModelKind::Glat => DecoderKind::Nat,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::At => "AT",
            ModelKind::Maskt => "MaskT",
            ModelKind::Glat => "GLAT",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "at" => Ok(ModelKind::At),
            "maskt" | "cmlm" => Ok(ModelKind::Maskt),
            "glat" => Ok(ModelKind::Glat),
            other => Err(Error::config(format!("unknown model kind `{other}` (at, maskt, glat)"))),
        }
    }
}

/// Architecture by preset name, or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub preset: String,
    /// Overrides `preset` when present; its vocab and length are replaced
    /// by the task's.
    pub arch: Option<ArchConfig>,
    pub dropout: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Glat,
            preset: "base".into(),
            arch: None,
            dropout: 0.0,
        }
    }
}

impl ModelSpec {
    pub fn arch(&self, vocab_size: usize, max_len: usize) -> Result<ArchConfig> {
        let c = match &self.arch {
            Some(a) => ArchConfig {
                vocab_size,
                max_len,
                ..a.clone()
            },
            None => ArchConfig::preset(&self.preset, vocab_size, max_len)?,
        };
        let c = c.with_dropout(self.dropout);
        c.validate()?;
        Ok(c)
    }

    /// Short name used in reports.
    pub fn tag(&self) -> String {
        let shape = match &self.arch {
            Some(a) => format!("({}x{},{}x{})", a.enc_layers, a.enc_dim, a.dec_layers, a.dec_dim),
            None => self.preset.clone(),
        };
        format!("{}-{shape}", self.kind.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    pub preset: String,
    pub train: TrainConfig,
    /// Beam width of the distillation decode; 1 is greedy.
    pub beam: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            preset: "base".into(),
            train: TrainConfig {
                steps: 2000,
                ..TrainConfig::default()
            },
            beam: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Train the scoring LM and report perplexity; otherwise perplexity
    /// is reported against a uniform model.
    pub perplexity: bool,
    pub lm_steps: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            perplexity: true,
            lm_steps: 300,
            probe: ProbeConfig::default(),
        }
    }
}

/// Pipeline stage, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    TrainTeacher,
    Distill,
    TrainNat,
    Decode,
    Evaluate,
    Probe,
    BenchSpeed,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::TrainTeacher,
        Stage::Distill,
        Stage::TrainNat,
        Stage::Decode,
        Stage::Evaluate,
        Stage::Probe,
        Stage::BenchSpeed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainTeacher => "train-teacher",
            Stage::Distill => "distill",
            Stage::TrainNat => "train-nat",
            Stage::Decode => "decode",
            Stage::Evaluate => "evaluate",
            Stage::Probe => "probe",
            Stage::BenchSpeed => "bench-speed",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

/// Everything a pipeline run depends on. Seeds nested in `task`, `train`
/// and `teacher.train` are replaced by `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// Train the student on the distilled corpus instead of the raw one.
    pub use_distilled: bool,
    /// Report tag; derived from the model when empty.
    pub name: String,
    pub task: SyntheticTaskSpec,
    pub teacher: TeacherSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSettings,
    pub speed: SpeedConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            output_dir: PathBuf::from("run"),
            stages: vec![
                Stage::Generate,
                Stage::TrainTeacher,
                Stage::Distill,
                Stage::TrainNat,
                Stage::Decode,
                Stage::Evaluate,
            ],
            use_distilled: true,
            name: String::new(),
            task: SyntheticTaskSpec::default(),
            teacher: TeacherSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalSettings::default(),
            speed: SpeedConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Copy with the pipeline seed pushed into every nested seed.
    pub fn resolved(mut self) -> Self {
        self.task.seed = self.seed;
        self.train.seed = self.seed;
        self.teacher.train.seed = self.seed;
        self.eval.probe.seed = self.seed;
        self
    }

    pub fn tag(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        let kd = if self.use_distilled && self.model.kind != ModelKind::At {
            "+KD"
        } else {
            ""
        };
        format!("{}{kd}", self.model.tag())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.arch(self.task.vocab_size(), self.task.max_len)?;
        ArchConfig::preset(&self.teacher.preset, self.task.vocab_size(), self.task.max_len)?;
        self.train.validate()?;
        self.teacher.train.validate()?;
        if self.teacher.beam == 0 {
            return Err(Error::config("teacher beam must be >= 1"));
        }
        if self.decode.iterations == 0 || self.decode.length_beam == 0 || self.decode.beam == 0 {
            return Err(Error::config("decode iterations, length_beam and beam must be >= 1"));
        }
        self.speed.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("no stages requested"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        digest(&[serde_json::to_string(self).unwrap_or_default().as_bytes()])
    }
}

pub(crate) fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
