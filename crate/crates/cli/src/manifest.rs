//! Run manifests and the configuration they pull in.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use impact_core::eval::EvalConfig;
use impact_core::gate::Policy;
use impact_core::gateway::{load_backend_configs, BackendConfig};
use impact_core::prompt::{system_text, ExemplarBank, PromptError, Strategy};
use impact_core::taxonomy::{load_taxonomy, Taxonomy};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    /// Name of the environment variable holding the shared API token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    /// Backend used by the gate endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
}

/// Everything a run needs, as file paths relative to the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corpus: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Backend names to run; every configured backend when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backend_names: Vec<String>,
    /// Strategies to run; all four when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<Strategy>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub serve: ServeSection,
}

fn is_default(s: &ServeSection) -> bool {
    *s == ServeSection::default()
}

impl RunManifest {
    /// Reads a manifest and resolves its paths against its directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("reading {}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.resolve(base);
        Ok(m)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.taxonomy,
            &mut self.backends,
            &mut self.policy,
            &mut self.eval,
            &mut self.exemplars,
            &mut self.gold,
            &mut self.out,
            &mut self.serve.data_dir,
            &mut self.serve.ui_dir,
            &mut self.serve.image_dir,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        self.corpus.iter_mut().for_each(join);
    }

    /// Every referenced input must exist before anything runs.
    pub fn check_inputs(&self) -> Result<(), Failure> {
        let inputs = [&self.taxonomy, &self.backends, &self.policy, &self.eval, &self.exemplars, &self.gold]
            .into_iter()
            .flatten()
            .chain(&self.corpus);
        for p in inputs {
            if !p.exists() {
                return Err(Failure::usage(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("reading {}: {e}", path.display())))
}

/// Configuration loaded from the files a manifest names.
pub struct Config {
    pub taxonomy: Arc<Taxonomy>,
    pub backends: Vec<BackendConfig>,
    /// Directory replay stores and image roots are resolved against.
    pub backend_dir: PathBuf,
    pub policy: Policy,
    pub eval: EvalConfig,
    pub bank: Option<ExemplarBank>,
}

impl Config {
    pub fn load(m: &RunManifest) -> Result<Self, Failure> {
        m.check_inputs()?;
        let taxonomy = match &m.taxonomy {
            Some(p) => load_taxonomy(Some(&read(p)?)).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
            None => load_taxonomy(None).expect("bundled taxonomy loads"),
        };
        let (backends, backend_dir) = match &m.backends {
            Some(p) => (
                load_backend_configs(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
                p.parent().unwrap_or(Path::new(".")).to_path_buf(),
            ),
            None => (Vec::new(), PathBuf::from(".")),
        };
        let policy = match &m.policy {
            Some(p) => Policy::from_json(&read(p)?, &taxonomy).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
            None => Policy::default(),
        };
        let mut eval = match &m.eval {
            Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
            None => EvalConfig::default(),
        };
        if eval.categories.is_empty() {
            eval.categories = taxonomy.evaluated_by_default();
        }
        let bank = match &m.exemplars {
            Some(p) => Some(
                ExemplarBank::from_json(&read(p)?, &taxonomy).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        Ok(Config { taxonomy: Arc::new(taxonomy), backends, backend_dir, policy, eval, bank })
    }

    pub fn backend(&self, name: &str) -> Result<&BackendConfig, Failure> {
        self.backends.iter().find(|b| b.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.backends.iter().map(|b| b.name.as_str()).collect();
            Failure::usage(format!("unknown backend `{name}` (configured: {})", known.join(", ")))
        })
    }

    /// Strategies that need exemplars fail here, before any request is sent.
    pub fn require_bank(&self, strategy: Strategy) -> Result<(), Failure> {
        system_text(strategy, &self.taxonomy, self.bank.as_ref())
            .map(drop)
            .map_err(|e| match e {
                PromptError::MissingBank(_) => {
                    Failure::usage(format!("missing_bank: {e} (set `exemplars` in the manifest)"))
                }
                other => Failure::usage(other.to_string()),
            })
    }
}
