//! Synthetic speech-like corpus with known transcripts and frame spans.
//!
//! Token sequences come from a first-order Markov chain started at its
//! stationary distribution. Each token is rendered as a run of noisy copies
//! of a per-token mean vector.
//!
//! On disk a split is a tab-separated manifest plus a feature file:
//!
//! ```text
//! id <TAB> n_frames <TAB> tokens <TAB> span ends <TAB> feature offset
//! ```
//!
//! The feature file starts with `CASSFEAT` and a little-endian `u32` feature
//! width, followed by each utterance's frames as little-endian `f32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc_lattice::mix_seed;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"CASSFEAT";
const HEADER_LEN: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            o => Err(Error::Config(format!("unknown split `{o}`"))),
        }
    }
}

/// Generator parameters. Token ids run `1..=vocab`; 0 is reserved for blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub d_feat: usize,
    /// `vocab × vocab`; row `i` is the successor distribution of token `i + 1`.
    pub transitions: Vec<Vec<f64>>,
    /// `vocab × d_feat` emission means.
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Inclusive raw-frame duration range per token.
    pub min_duration: usize,
    pub max_duration: usize,
    /// Inclusive token-count range per utterance.
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub subsample_factor: usize,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Default desk-scale corpus: 32 tokens, 16-dim features, 2000/200/200
    /// utterances of 5–15 tokens, 8–24 raw frames per token.
    pub fn desk(seed: u64) -> Self {
        Self::random(32, 16, 1.0, seed)
    }

    /// Random chain and emission means. Each token gets four preferred
    /// successors (possibly itself) carrying 85% of its mass.
    pub fn random(vocab: usize, d_feat: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
        let preferred = 4.min(vocab);
        let mut transitions = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            let mut row = vec![0.15 / vocab as f64; vocab];
            let weights: Vec<f64> = (0..preferred).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = weights.iter().sum();
            let mut chosen = Vec::with_capacity(preferred);
            while chosen.len() < preferred {
                let j = rng.random_range(0..vocab);
                if !chosen.contains(&j) {
                    chosen.push(j);
                }
            }
            for (j, w) in chosen.into_iter().zip(weights) {
                row[j] += 0.85 * w / total;
            }
            transitions.push(row);
        }
        let means = (0..vocab)
            .map(|_| (0..d_feat).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self {
            vocab,
            d_feat,
            transitions,
            means,
            sigma,
            min_duration: 8,
            max_duration: 24,
            min_tokens: 5,
            max_tokens: 15,
            subsample_factor: 4,
            train_count: 2000,
            dev_count: 200,
            test_count: 200,
            seed,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Dev => self.dev_count,
            Split::Test => self.test_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d_feat == 0 {
            return bad("vocab and d_feat must be positive".into());
        }
        if self.transitions.len() != self.vocab || self.means.len() != self.vocab {
            return bad("transition and mean tables must have one row per token".into());
        }
        for (i, row) in self.transitions.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != self.vocab || row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {} is not a distribution", i + 1));
            }
        }
        if self.means.iter().any(|m| m.len() != self.d_feat || m.iter().any(|v| !v.is_finite())) {
            return bad("emission means must be finite with d_feat entries".into());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("sigma must be finite and non-negative".into());
        }
        if self.subsample_factor == 0 || self.min_duration < self.subsample_factor {
            return bad(format!(
                "minimum duration {} is shorter than the subsampling factor {}",
                self.min_duration, self.subsample_factor
            ));
        }
        if self.min_duration > self.max_duration || self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("empty duration or token-count range".into());
        }
        Ok(())
    }

    /// Stationary distribution of the chain, by power iteration.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..100_000 {
            let mut next = vec![0.0; v];
            for (i, row) in self.transitions.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            // averaging with the previous iterate damps periodic chains
            pi = next.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect();
            if delta < 1e-15 {
                return Ok(pi);
            }
        }
        Err(Error::Config("transition matrix has no reachable stationary distribution".into()))
    }

    fn draw(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// Markov token sequence (ids `1..=vocab`), first token from `initial`.
    pub fn sample_tokens(&self, rng: &mut ChaCha8Rng, initial: &[f64]) -> Vec<usize> {
        let n = rng.random_range(self.min_tokens..=self.max_tokens);
        let mut out = Vec::with_capacity(n);
        let mut cur = Self::draw(rng, initial);
        out.push(cur + 1);
        for _ in 1..n {
            cur = Self::draw(rng, &self.transitions[cur]);
            out.push(cur + 1);
        }
        out
    }

    fn utterance(&self, split: Split, index: usize, initial: &[f64]) -> Utterance {
        let seed = mix_seed(mix_seed(self.seed, split.stream()), index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = self.sample_tokens(&mut rng, initial);
        let mut span_ends = Vec::with_capacity(tokens.len());
        let mut frames = Vec::new();
        let mut t = 0;
        for &tok in &tokens {
            let dur = rng.random_range(self.min_duration..=self.max_duration);
            let mean = &self.means[tok - 1];
            for _ in 0..dur {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    frames.push((m + self.sigma * z) as f32);
                }
            }
            t += dur;
            span_ends.push(t);
        }
        Utterance {
            id: format!("{}-{index:05}", split.name()),
            d_feat: self.d_feat,
            frames,
            tokens,
            span_ends,
        }
    }

    /// All utterances of one split, in index order.
    pub fn generate_split(&self, split: Split) -> Result<Vec<Utterance>> {
        self.validate()?;
        let initial = self.stationary()?;
        Ok((0..self.count(split))
            .into_par_iter()
            .map(|i| self.utterance(split, i, &initial))
            .collect())
    }
}

/// One utterance: raw frames, transcript and the raw-frame span of each token.
/// Unlabeled utterances have no tokens and no spans.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub d_feat: usize,
    /// Row-major `n_frames × d_feat`.
    pub frames: Vec<f32>,
    pub tokens: Vec<usize>,
    /// Exclusive end of each token's span; spans tile `0..n_frames`.
    pub span_ends: Vec<usize>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.d_feat.max(1)
    }

    /// Half-open raw-frame span of token `u`.
    pub fn span(&self, u: usize) -> std::ops::Range<usize> {
        let start = if u == 0 { 0 } else { self.span_ends[u - 1] };
        start..self.span_ends[u]
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&x| f64::from(x)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub train_tokens: usize,
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tsv", split.name()))
}

fn features_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("feats")
}

/// Write `corpus.json` and the three splits under `dir`.
pub fn generate(spec: &CorpusSpec, dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(spec)?)?;
    let mut counts = [0usize; 3];
    let mut train_tokens = 0;
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let utts = spec.generate_split(split)?;
        if split == Split::Train {
            train_tokens = utts.iter().map(|u| u.tokens.len()).sum();
        }
        write_split(&utts, spec.d_feat, &manifest_path(dir, split))?;
        counts[i] = utts.len();
    }
    Ok(CorpusSummary {
        train: counts[0],
        dev: counts[1],
        test: counts[2],
        train_tokens,
    })
}

pub fn load_spec(dir: &Path) -> Result<CorpusSpec> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("corpus.json"))?)?)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_split(utts: &[Utterance], d_feat: usize, manifest: &Path) -> Result<()> {
    let mut feats = BufWriter::new(File::create(features_path(manifest))?);
    let mut man = BufWriter::new(File::create(manifest)?);
    feats.write_all(FEATURE_MAGIC)?;
    feats.write_all(&(d_feat as u32).to_le_bytes())?;
    let mut offset = HEADER_LEN;
    for u in utts {
        if u.d_feat != d_feat {
            return Err(Error::Shape(format!("{}: d_feat {} != {d_feat}", u.id, u.d_feat)));
        }
        writeln!(
            man,
            "{}\t{}\t{}\t{}\t{}",
            u.id,
            u.n_frames(),
            join(&u.tokens),
            join(&u.span_ends),
            offset
        )?;
        for x in &u.frames {
            feats.write_all(&x.to_le_bytes())?;
        }
        offset += 4 * u.frames.len() as u64;
    }
    feats.flush()?;
    man.flush()?;
    Ok(())
}

/// Streaming reader over a manifest and its feature file.
pub struct ManifestReader {
    manifest_path: PathBuf,
    features_path: PathBuf,
    lines: BufReader<File>,
    feats: BufReader<File>,
    feats_len: u64,
    d_feat: usize,
    offset: u64,
    line: String,
    failed: bool,
}

pub fn load_manifest(path: &Path) -> Result<ManifestReader> {
    let features_path = features_path(path);
    let mut feats = BufReader::new(File::open(&features_path)?);
    let feats_len = feats.get_ref().metadata()?.len();
    let mut header = [0u8; HEADER_LEN as usize];
    feats.read_exact(&mut header).map_err(|_| Error::Corrupt {
        path: features_path.clone(),
        offset: 0,
        reason: "truncated header".into(),
    })?;
    if &header[..8] != FEATURE_MAGIC {
        return Err(Error::Corrupt {
            path: features_path,
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let d_feat = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if d_feat == 0 {
        return Err(Error::Corrupt {
            path: features_path,
            offset: 8,
            reason: "zero feature width".into(),
        });
    }
    Ok(ManifestReader {
        manifest_path: path.to_path_buf(),
        features_path,
        lines: BufReader::new(File::open(path)?),
        feats,
        feats_len,
        d_feat,
        offset: 0,
        line: String::new(),
        failed: false,
    })
}

/// Load a whole split into memory.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    load_manifest(&manifest_path(dir, split))?.collect()
}

impl ManifestReader {
    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    fn corrupt(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.manifest_path.clone(),
            offset,
            reason: reason.into(),
        }
    }

    fn parse(&mut self, at: u64) -> Result<Utterance> {
        let line = self.line.trim_end_matches(['\n', '\r']);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(self.corrupt(at, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| self.corrupt(at, format!("bad {what} `{s}`")))
        };
        let list = |s: &str, what: &str| -> Result<Vec<usize>> { s.split_whitespace().map(|x| num(x, what)).collect() };
        let id = fields[0].to_string();
        let n_frames = num(fields[1], "frame count")?;
        let tokens = list(fields[2], "token")?;
        let span_ends = list(fields[3], "span end")?;
        let feat_offset = fields[4]
            .parse::<u64>()
            .map_err(|_| self.corrupt(at, format!("bad offset `{}`", fields[4])))?;
        if tokens.len() != span_ends.len() {
            return Err(self.corrupt(at, "token and span counts differ"));
        }
        let tiles = span_ends.first().is_none_or(|&s| s > 0)
            && span_ends.windows(2).all(|w| w[0] < w[1])
            && span_ends.last().is_none_or(|&e| e == n_frames);
        if !tiles {
            return Err(self.corrupt(at, "spans do not tile the utterance"));
        }
        let n_values = n_frames * self.d_feat;
        let end = feat_offset + 4 * n_values as u64;
        if feat_offset < HEADER_LEN || end > self.feats_len {
            return Err(Error::Corrupt {
                path: self.features_path.clone(),
                offset: feat_offset.min(self.feats_len),
                reason: format!("record `{id}` runs past end of file ({end} > {})", self.feats_len),
            });
        }
        self.feats.seek(SeekFrom::Start(feat_offset))?;
        let mut buf = vec![0u8; 4 * n_values];
        self.feats.read_exact(&mut buf)?;
        let frames: Vec<f32> = buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(i) = frames.iter().position(|x| !x.is_finite()) {
            return Err(Error::Corrupt {
                path: self.features_path.clone(),
                offset: feat_offset + 4 * i as u64,
                reason: "non-finite feature value".into(),
            });
        }
        Ok(Utterance {
            id,
            d_feat: self.d_feat,
            frames,
            tokens,
            span_ends,
        })
    }
}

impl Iterator for ManifestReader {
    type Item = Result<Utterance>;

    fn next(&mut self) -> Option<Result<Utterance>> {
        if self.failed {
            return None;
        }
        self.line.clear();
        let at = self.offset;
        let result = match self.lines.read_line(&mut self.line) {
            Ok(0) => return None,
            Ok(n) => {
                self.offset += n as u64;
                if !self.line.ends_with('\n') {
                    Err(self.corrupt(at, "truncated record"))
                } else {
                    self.parse(at)
                }
            }
            Err(e) => Err(e.into()),
        };
        self.failed = result.is_err();
        Some(result)
    }
}
