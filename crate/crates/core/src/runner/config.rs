//! Experiment configuration: one TOML file per run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution_io::{Aggregation, AttributionMethod};
use crate::corpus::{Adapter, Task};
use crate::error::{Error, Result};
use crate::model_client::{EndpointConfig, DEFAULT_CLASSIFY_MAX_TOKENS, DEFAULT_RATIONALE_MAX_TOKENS};
use crate::perturbation::{MaskScope, MaskStyle};
use crate::prompting::{PromptMethod, Selection, SelectionSpec, TemplateKey, TemplateRegistry};
use crate::rationale_parser::MatchMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub adapter: Adapter,
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptingCells {
    pub method: PromptMethod,
    pub selections: Vec<Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionCells {
    pub method: AttributionMethod,
    /// Interchange file with one record per example.
    pub file: PathBuf,
    pub selections: Vec<Selection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRow {
    /// Top-Var random words.
    Random,
    Human,
    Everything,
    /// Nothing masked; a control that must not flip.
    Empty,
}

impl BaselineRow {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineRow::Random => "random",
            BaselineRow::Human => "human",
            BaselineRow::Everything => "everything",
            BaselineRow::Empty => "empty",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetRef,
    pub endpoint: EndpointConfig,
    pub model_id: String,
    #[serde(default = "default_classify_tokens")]
    pub classify_max_tokens: u32,
    #[serde(default = "default_rationale_tokens")]
    pub rationale_max_tokens: u32,
    /// Template directory with a manifest; the built-in set when absent.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub prompting: Vec<PromptingCells>,
    #[serde(default)]
    pub attribution: Vec<AttributionCells>,
    #[serde(default)]
    pub baselines: Vec<BaselineRow>,
    /// Required exactly when some cell uses Top-Ratio.
    #[serde(default)]
    pub top_ratio: Option<f64>,
    #[serde(default = "default_scopes")]
    pub scopes: Vec<MaskScope>,
    /// Seeds for the random alignment baseline.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Seeds for the random faithfulness row.
    #[serde(default = "default_faithfulness_seeds")]
    pub faithfulness_seeds: usize,
    #[serde(default)]
    pub k_sweep: Vec<usize>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub offline: bool,
    #[serde(default)]
    pub match_mode: MatchMode,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub mask_style: MaskStyle,
}

fn default_classify_tokens() -> u32 {
    DEFAULT_CLASSIFY_MAX_TOKENS
}
fn default_rationale_tokens() -> u32 {
    DEFAULT_RATIONALE_MAX_TOKENS
}
fn default_scopes() -> Vec<MaskScope> {
    vec![MaskScope::Input]
}
fn default_seeds() -> usize {
    100
}
fn default_faithfulness_seeds() -> usize {
    1
}
fn default_concurrency() -> usize {
    4
}

impl ExperimentConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.out_dir);
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates_dir.as_mut() {
            fix(p);
        }
        for a in &mut self.attribution {
            fix(&mut a.file);
        }
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn uses_top_ratio(&self) -> bool {
        self.prompting
            .iter()
            .flat_map(|p| &p.selections)
            .chain(self.attribution.iter().flat_map(|a| &a.selections))
            .any(|s| *s == Selection::TopRatio)
    }

    pub fn selection_spec(&self, selection: Selection) -> Result<SelectionSpec> {
        match selection {
            Selection::Unbound => Ok(SelectionSpec::Unbound),
            Selection::TopVar => Ok(SelectionSpec::TopVar),
            Selection::TopRatio => {
                let ratio = self
                    .top_ratio
                    .ok_or_else(|| Error::Config("top_ratio selection without a ratio".into()))?;
                Ok(SelectionSpec::TopRatio { ratio })
            }
            Selection::NotApplicable => Err(Error::Config("selection n/a is not a budget".into())),
        }
    }

    /// Checks everything that can be checked without the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.endpoint.max_in_flight == 0 {
            return Err(Error::Config("endpoint.max_in_flight must be at least 1".into()));
        }
        match (self.uses_top_ratio(), self.top_ratio) {
            (true, None) => {
                return Err(Error::Config("top_ratio selection used but top_ratio is not set".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Config("top_ratio is set but no cell uses it".into()))
            }
            (true, Some(r)) => SelectionSpec::TopRatio { ratio: r }.validate()?,
            (false, None) => {}
        }
        let mut seen = BTreeSet::new();
        for p in &self.prompting {
            if !matches!(
                p.method,
                PromptMethod::Normal | PromptMethod::Short | PromptMethod::Extended
            ) {
                return Err(Error::Config(format!(
                    "{} is not a rationale prompt",
                    p.method.as_str()
                )));
            }
            for s in &p.selections {
                if *s == Selection::NotApplicable {
                    return Err(Error::Config(format!("prompting {} needs a selection", p.method.as_str())));
                }
                if !seen.insert(("prompting", p.method.as_str(), s.as_str())) {
                    return Err(Error::Config(format!(
                        "duplicate cell prompting/{}/{}",
                        p.method.as_str(),
                        s.as_str()
                    )));
                }
            }
        }
        for a in &self.attribution {
            for s in &a.selections {
                if !s.is_bounded() {
                    return Err(Error::Config(format!(
                        "attribution {} needs top_var or top_ratio, got {}",
                        a.method.as_str(),
                        s.as_str()
                    )));
                }
                if !seen.insert(("attribution", a.method.as_str(), s.as_str())) {
                    return Err(Error::Config(format!(
                        "duplicate cell attribution/{}/{}",
                        a.method.as_str(),
                        s.as_str()
                    )));
                }
            }
        }
        let mut b = self.baselines.clone();
        b.sort();
        b.dedup();
        if b.len() != self.baselines.len() {
            return Err(Error::Config("duplicate baseline row".into()));
        }
        if self.baselines.contains(&BaselineRow::Random) && self.seeds == 0 {
            return Err(Error::Config("random baseline needs seeds >= 1".into()));
        }
        if self.faithfulness_seeds == 0 {
            return Err(Error::Config("faithfulness_seeds must be at least 1".into()));
        }
        if self.scopes.is_empty() {
            return Err(Error::Config("no masking scope configured".into()));
        }
        if self.k_sweep.contains(&0) {
            return Err(Error::Config("k_sweep values must be positive".into()));
        }
        if let Some(0) = self.dataset.subset {
            return Err(Error::Config("dataset.subset must be positive".into()));
        }
        Ok(())
    }

    /// Template keys the configured cells will render for `task`.
    pub fn required_templates(&self, task: Task) -> Vec<TemplateKey> {
        let mut keys = vec![TemplateKey::classification(task)];
        if !self.attribution.is_empty() {
            keys.push(TemplateKey::attribution_label(task));
        }
        for p in &self.prompting {
            for s in &p.selections {
                keys.push(TemplateKey::new(p.method, *s, task));
            }
            if !self.k_sweep.is_empty() {
                keys.push(TemplateKey::new(p.method, Selection::TopVar, task));
            }
        }
        keys.sort();
        keys.dedup();
        keys
    }

    /// Fails on the first configured template the registry lacks.
    pub fn check_templates(&self, registry: &TemplateRegistry, task: Task) -> Result<()> {
        for key in self.required_templates(task) {
            registry.get(&key)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
model_id = "m"
out_dir = "out"
[dataset]
path = "data.jsonl"
adapter = "normalized"
[endpoint]
base_url = "http://127.0.0.1:1/v1"
"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, 100);
        assert_eq!(cfg.scopes, vec![MaskScope::Input]);
        cfg.validate().unwrap();
    }

    #[test]
    fn ratio_present_iff_used() {
        let with_ratio = format!("top_ratio = 0.2\n{MINIMAL}");
        let cfg = ExperimentConfig::from_toml(&with_ratio).unwrap();
        assert!(cfg.validate().is_err());
        let uses = format!("{MINIMAL}[[prompting]]\nmethod = \"normal\"\nselections = [\"top_ratio\"]\n");
        let cfg = ExperimentConfig::from_toml(&uses).unwrap();
        assert!(cfg.validate().is_err());
        let both = format!("top_ratio = 0.2\n{uses}");
        ExperimentConfig::from_toml(&both).unwrap().validate().unwrap();
    }

    #[test]
    fn unbound_attribution_is_rejected() {
        let text = format!(
            "{MINIMAL}[[attribution]]\nmethod = \"saliency\"\nfile = \"a.jsonl\"\nselections = [\"unbound\"]\n"
        );
        assert!(ExperimentConfig::from_toml(&text).unwrap().validate().is_err());
    }

    #[test]
    fn unknown_field_is_an_error() {
        assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds = 3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/tmp/x"));
        assert_eq!(cfg.dataset.path, Path::new("/tmp/x/data.jsonl"));
    }
}
