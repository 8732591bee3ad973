use std::path::{Path, PathBuf};

use hass_core::drafting::TreeParams;
use hass_core::engine::{DecodeConfig, Method};
use hass_core::model::ModelConfig;
use hass_core::pretrain::PretrainConfig;
use hass_core::training::{DatasetOptions, TrainConfig};
use hass_core::verification::SamplingParams;
use hass_core::{HassError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads a JSON config, rejecting unknown keys; defaults when absent.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| HassError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Writes the resolved config as `config.json` in `dir`.
pub fn save<T: Serialize>(config: &T, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    std::fs::write(dir.join("config.json"), text)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { corpus: "data/corpus.txt".into(), out_dir: "runs/data".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainTargetConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainTargetConfig {
    fn default() -> Self {
        Self {
            data_dir: "runs/data".into(),
            out_dir: "runs/target".into(),
            model: ModelConfig { vocab_size: 0, d_model: 128, n_layers: 4, n_heads: 4, d_ff: 512, max_seq_len: 512, rms_norm_eps: 1e-5 },
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainDraftConfig {
    pub data_dir: PathBuf,
    pub target: PathBuf,
    pub out_dir: PathBuf,
    /// Built datasets are stored here and reused when the file exists.
    pub dataset_cache: Option<PathBuf>,
    pub dataset: DatasetOptions,
    pub train: TrainConfig,
}

impl Default for TrainDraftConfig {
    fn default() -> Self {
        Self {
            data_dir: "runs/data".into(),
            target: "runs/target/target.bin".into(),
            out_dir: "runs/draft".into(),
            dataset_cache: None,
            dataset: DatasetOptions { stride: 256, ..DatasetOptions::default() },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

impl std::str::FromStr for NamedPath {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(Self { name: n.into(), path: p.into() }),
            _ => Err(format!("expected NAME=PATH, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub name: String,
    pub method: Method,
    /// Name of a draft checkpoint; absent for vanilla decoding.
    #[serde(default)]
    pub draft: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub data_dir: PathBuf,
    pub target: PathBuf,
    pub out_dir: PathBuf,
    pub drafts: Vec<NamedPath>,
    /// Explicit cases; when empty, every method is run with every draft.
    pub cases: Vec<CaseSpec>,
    pub methods: Vec<Method>,
    pub temperatures: Vec<f64>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
    /// Trains one drafter per grid cell and benchmarks them all.
    pub sweep: Option<SweepConfig>,
}

/// Ablation grid over alignment steps and Top-K settings. Every cell
/// shares the dataset and the remaining training settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub align_steps: Vec<usize>,
    pub top_k: Vec<usize>,
    pub top_k_weight: Vec<f64>,
    pub method: Method,
    pub dataset_cache: Option<PathBuf>,
    pub dataset: DatasetOptions,
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let base = TrainDraftConfig::default();
        Self {
            align_steps: vec![base.train.align_steps],
            top_k: vec![base.train.top_k],
            top_k_weight: vec![base.train.top_k_weight],
            method: Method::Tree,
            dataset_cache: None,
            dataset: base.dataset,
            train: base.train,
        }
    }
}

impl SweepConfig {
    /// `(name, config)` per grid cell, align steps outermost.
    pub fn cells(&self) -> Vec<(String, TrainConfig)> {
        let mut out = Vec::new();
        for &n in &self.align_steps {
            for &k in &self.top_k {
                for &w in &self.top_k_weight {
                    let cfg = TrainConfig { align_steps: n, top_k: k, top_k_weight: w, ..self.train.clone() };
                    out.push((format!("n{n}-k{k}-w{w}"), cfg));
                }
            }
        }
        out
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data_dir: "runs/data".into(),
            target: "runs/target/target.bin".into(),
            out_dir: "runs/bench".into(),
            drafts: Vec::new(),
            cases: Vec::new(),
            methods: vec![Method::Vanilla, Method::Chain, Method::Tree],
            temperatures: vec![0.0, 1.0],
            prompts: 200,
            prompt_len: 48,
            decode: DecodeConfig::default(),
            seed: 0,
            sweep: None,
        }
    }
}

impl BenchConfig {
    pub fn resolved_cases(&self) -> Vec<CaseSpec> {
        if !self.cases.is_empty() {
            return self.cases.clone();
        }
        let mut out = Vec::new();
        for &m in &self.methods {
            if m == Method::Vanilla {
                out.push(CaseSpec { name: "vanilla".into(), method: m, draft: None });
            } else {
                for d in &self.drafts {
                    out.push(CaseSpec { name: format!("{}/{}", d.name, m.name()), method: m, draft: Some(d.name.clone()) });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub data_dir: PathBuf,
    pub target: PathBuf,
    pub draft: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub prompt: String,
    pub sampling: SamplingParams,
    pub decode: DecodeConfig,
    pub trace: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            data_dir: "runs/data".into(),
            target: "runs/target/target.bin".into(),
            draft: None,
            out_dir: None,
            prompt: String::new(),
            sampling: SamplingParams::default(),
            decode: DecodeConfig::default(),
            trace: false,
        }
    }
}

/// Decode flags shared by `bench` and `generate`.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct DecodeFlags {
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub chain_len: Option<usize>,
    #[arg(long)]
    pub tree_budget: Option<usize>,
    #[arg(long)]
    pub tree_depth: Option<usize>,
    #[arg(long)]
    pub tree_branch: Option<usize>,
}

impl DecodeFlags {
    pub fn apply(&self, d: &mut DecodeConfig) {
        set(&mut d.max_new_tokens, self.max_new_tokens);
        set(&mut d.chain_len, self.chain_len);
        let t: &mut TreeParams = &mut d.tree;
        set(&mut t.budget, self.tree_budget);
        set(&mut t.depth, self.tree_depth);
        set(&mut t.branch, self.tree_branch);
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
