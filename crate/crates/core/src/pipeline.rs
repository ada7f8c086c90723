//! Run configuration and the end-to-end recipe: corpus generation, encoder
//! pre-training, model training, and evaluation of every decoding mode.
//!
//! A run configuration is a flat `key=value` file. Later sources override
//! earlier ones: built-in defaults, then the file, then individual overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ctc_lattice::{BsaPath, EsaConfig, EsaDistribution};
use crate::decoder_eval::{
    evaluate, evaluate_at, format_table, measure_rtf_at, measure_rtf_nat, DecodeMode, DecodeParams, EvalReport, Ranker,
};
use crate::error::{Error, Result};
use crate::model::{AtModel, CassNat, CtcModel, ModelConfig};
use crate::numerics::ParamStore;
use crate::synth_data::{self, CorpusSpec, Split, Utterance};
use crate::trainer::{train, TrainConfig, TrainOutcome};

pub const CONFIG_FILE: &str = "resolved.cfg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub model_seed: u64,
    pub pretrain_steps: usize,
    pub at_steps: usize,
    pub corpus_seed: u64,
    pub sigma: f64,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub threshold: f64,
    pub samples: usize,
    pub distribution: EsaDistribution,
    pub esa_seed: u64,
    pub beam: usize,
    pub bsa_path: BsaPath,
    pub ranker: Ranker,
    /// Test utterances timed for RTF; 0 means the whole test set.
    pub rtf_utterances: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::desk(0);
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_seed: 1,
            pretrain_steps: 1500,
            at_steps: 3000,
            corpus_seed: 1,
            sigma: corpus.sigma,
            train_count: corpus.train_count,
            dev_count: corpus.dev_count,
            test_count: corpus.test_count,
            threshold: 0.7,
            samples: 50,
            distribution: EsaDistribution::Top2Uniform,
            esa_seed: 0,
            beam: 10,
            bsa_path: BsaPath::Tracked,
            ranker: Ranker::SelfScore,
            rtf_utterances: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            workers: 1,
        }
    }
}

fn scalar_to_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        o => o.to_string(),
    }
}

impl RunConfig {
    fn to_map(&self) -> Result<Map<String, Value>> {
        match serde_json::to_value(self)? {
            Value::Object(m) => Ok(m),
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = self.to_map()?;
        let slot = map
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_f64() => Value::from(value.parse::<f64>().map_err(|_| bad())?),
            Value::Number(_) => Value::from(value.parse::<u64>().map_err(|_| bad())?),
            _ => Value::String(value.to_string()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Apply `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> Result<String> {
        let map = self.to_map()?;
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        Ok(keys
            .into_iter()
            .map(|k| format!("{k}={}\n", scalar_to_string(&map[k])))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.esa().validate()?;
        self.corpus().validate()?;
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        Ok(())
    }

    pub fn esa(&self) -> EsaConfig {
        EsaConfig {
            threshold: self.threshold,
            samples: self.samples,
            distribution: self.distribution,
            seed: self.esa_seed,
        }
    }

    pub fn decode_params(&self, mode: DecodeMode) -> DecodeParams {
        DecodeParams {
            mode,
            esa: self.esa(),
            beam: self.beam,
            bsa_path: self.bsa_path,
            ranker: self.ranker,
        }
    }

    pub fn corpus(&self) -> CorpusSpec {
        let mut c = CorpusSpec::random(self.model.vocab, self.model.d_feat, self.sigma, self.corpus_seed);
        c.subsample_factor = self.model.subsample_factor;
        c.min_duration = c.min_duration.max(self.model.subsample_factor);
        c.max_duration = c.max_duration.max(c.min_duration);
        c.train_count = self.train_count;
        c.dev_count = self.dev_count;
        c.test_count = self.test_count;
        c
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            max_steps: self.pretrain_steps,
            ..self.train.clone()
        }
    }

    pub fn at_config(&self) -> TrainConfig {
        TrainConfig {
            max_steps: self.at_steps,
            ..self.train.clone()
        }
    }

    /// Write the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_text()?)?;
        Ok(path)
    }
}

/// Paths of a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn nat_dir(&self) -> PathBuf {
        self.root.join("nat")
    }
    pub fn at_dir(&self) -> PathBuf {
        self.root.join("at")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn encoder_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("final.bin")
    }
    pub fn nat_checkpoint(&self) -> PathBuf {
        self.nat_dir().join("final.bin")
    }
    pub fn at_checkpoint(&self) -> PathBuf {
        self.at_dir().join("final.bin")
    }
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Utterance>> {
    synth_data::load_split(&cfg.data_dir, split)
}

pub fn gen_data(cfg: &RunConfig) -> Result<synth_data::CorpusSummary> {
    let summary = synth_data::generate(&cfg.corpus(), &cfg.data_dir)?;
    cfg.write_resolved(&cfg.data_dir)?;
    Ok(summary)
}

pub fn pretrain(cfg: &RunConfig) -> Result<(CtcModel, TrainOutcome)> {
    let (train_set, dev) = (load_split(cfg, Split::Train)?, load_split(cfg, Split::Dev)?);
    let dir = RunLayout::new(&cfg.out_dir).pretrain_dir();
    cfg.write_resolved(&dir)?;
    let mut model = CtcModel::new(cfg.model.clone(), cfg.model_seed)?;
    let outcome = train(&mut model, &train_set, &dev, &cfg.pretrain_config(), Some(&dir))?;
    Ok((model, outcome))
}

fn load_encoder(layout: &RunLayout) -> Result<Option<ParamStore>> {
    let p = layout.encoder_checkpoint();
    if p.exists() {
        Ok(Some(ParamStore::load(&p)?))
    } else {
        Ok(None)
    }
}

/// Train the non-autoregressive model, starting from the pre-trained encoder
/// when one exists in the run directory.
pub fn train_nat(cfg: &RunConfig) -> Result<(CassNat, TrainOutcome)> {
    let (train_set, dev) = (load_split(cfg, Split::Train)?, load_split(cfg, Split::Dev)?);
    let layout = RunLayout::new(&cfg.out_dir);
    cfg.write_resolved(&layout.nat_dir())?;
    let mut model = CassNat::new(cfg.model.clone(), cfg.model_seed)?;
    if let Some(enc) = load_encoder(&layout)? {
        model.load_encoder(&enc)?;
    }
    let outcome = train(&mut model, &train_set, &dev, &cfg.train, Some(&layout.nat_dir()))?;
    Ok((model, outcome))
}

pub fn train_at(cfg: &RunConfig) -> Result<(AtModel, TrainOutcome)> {
    let (train_set, dev) = (load_split(cfg, Split::Train)?, load_split(cfg, Split::Dev)?);
    let layout = RunLayout::new(&cfg.out_dir);
    cfg.write_resolved(&layout.at_dir())?;
    let mut model = AtModel::new(cfg.model.clone(), cfg.model_seed)?;
    if let Some(enc) = load_encoder(&layout)? {
        model.load_encoder(&enc)?;
    }
    let outcome = train(&mut model, &train_set, &dev, &cfg.at_config(), Some(&layout.at_dir()))?;
    Ok((model, outcome))
}

pub fn load_nat(cfg: &RunConfig, path: &Path) -> Result<CassNat> {
    CassNat::from_params(cfg.model.clone(), &ParamStore::load(path)?)
}

pub fn load_at(cfg: &RunConfig, path: &Path) -> Result<AtModel> {
    AtModel::from_params(cfg.model.clone(), &ParamStore::load(path)?)
}

/// Evaluation of every decoding mode plus the autoregressive baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<EvalReport>,
}

impl SuiteReport {
    pub fn get(&self, system: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.system == system)
    }

    pub fn table(&self) -> String {
        format_table(&self.reports)
    }
}

/// Score `modes` on `utts`, plus the AT baseline when `baseline` is set and
/// an AT model is given (it also serves the `at` ranker). With `timing`, also
/// measure serial RTF on the first `rtf_utterances` of them.
pub fn evaluate_suite(
    cfg: &RunConfig,
    nat: &CassNat,
    at: Option<&AtModel>,
    baseline: bool,
    utts: &[Utterance],
    modes: &[DecodeMode],
    timing: bool,
) -> Result<SuiteReport> {
    let timed = if cfg.rtf_utterances == 0 {
        utts
    } else {
        &utts[..cfg.rtf_utterances.min(utts.len())]
    };
    let mut reports = Vec::new();
    for &mode in modes {
        let params = cfg.decode_params(mode);
        let mut r = evaluate(nat, utts, &params, at)?;
        if timing && mode != DecodeMode::Oracle {
            r.rtf = Some(measure_rtf_nat(nat, timed, &params, at)?);
        }
        reports.push(r);
    }
    if let Some(at) = at.filter(|_| baseline) {
        let mut r = evaluate_at(at, utts)?;
        if timing {
            r.rtf = Some(measure_rtf_at(at, timed)?);
        }
        reports.push(r);
    }
    Ok(SuiteReport { reports })
}

/// Write `report.json`, `report.txt`, one histogram CSV and one hypothesis
/// file per system into `dir`.
pub fn write_suite(suite: &SuiteReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(suite)?)?;
    std::fs::write(dir.join("report.txt"), suite.table())?;
    for r in &suite.reports {
        let stem = r.system.replace(['(', ')', '='], "_");
        std::fs::write(dir.join(format!("hist_{stem}.csv")), r.histogram_csv())?;
        std::fs::write(dir.join(format!("hyp_{stem}.txt")), r.hypotheses_text())?;
    }
    Ok(())
}
