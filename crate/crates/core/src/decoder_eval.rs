//! Decoding pipelines (best path, beam search, sampling, oracle), candidate
//! ranking, and the evaluation metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment_map::{collapse, trigger_masks};
use crate::ctc_lattice::{beam_search_align, best_path_align, esa_sample, viterbi_align, Alignment, BsaPath, EsaConfig};
use crate::error::{Error, Result};
use crate::model::{argmax, features_tensor, AtModel, AtSession, CassNat, NatSession};
use crate::synth_data::Utterance;

/// Nominal duration of one raw input frame.
pub const FRAME_SECONDS: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Bpa,
    Bsa,
    Esa,
    Oracle,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 4] = [DecodeMode::Bpa, DecodeMode::Bsa, DecodeMode::Esa, DecodeMode::Oracle];
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpa" => Ok(Self::Bpa),
            "bsa" => Ok(Self::Bsa),
            "esa" => Ok(Self::Esa),
            "oracle" => Ok(Self::Oracle),
            o => Err(Error::Config(format!("unknown decode mode `{o}`"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bpa => "bpa",
            Self::Bsa => "bsa",
            Self::Esa => "esa",
            Self::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranker {
    /// Mean per-token log-probability under the decoder's own output.
    #[default]
    #[serde(rename = "self")]
    SelfScore,
    /// Teacher-forced log-probability under the autoregressive model.
    At,
}

impl std::str::FromStr for Ranker {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfScore),
            "at" => Ok(Self::At),
            o => Err(Error::Config(format!("unknown ranker `{o}`"))),
        }
    }
}

impl std::fmt::Display for Ranker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SelfScore => "self",
            Self::At => "at",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub esa: EsaConfig,
    pub beam: usize,
    pub bsa_path: BsaPath,
    pub ranker: Ranker,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Bpa,
            esa: EsaConfig::default(),
            beam: 10,
            bsa_path: BsaPath::Tracked,
            ranker: Ranker::SelfScore,
        }
    }
}

impl DecodeParams {
    pub fn with_mode(mut self, mode: DecodeMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub token_logprobs: Vec<f64>,
    pub alignment: Alignment,
    pub rank_score: f64,
    pub mode: DecodeMode,
    /// The chosen alignment triggered no token.
    pub empty: bool,
    /// Distinct decoder passes spent on this utterance.
    pub decoder_passes: usize,
}

/// Highest `rank_score` wins; ties prefer the higher alignment
/// log-probability, then the earlier candidate.
pub fn rank_candidates(hyps: &[Hypothesis]) -> Result<usize> {
    if hyps.is_empty() {
        return Err(Error::Config("no candidates to rank".into()));
    }
    let mut best = 0;
    for (i, h) in hyps.iter().enumerate().skip(1) {
        let b = &hyps[best];
        if h.rank_score > b.rank_score || (h.rank_score == b.rank_score && h.alignment.logprob > b.alignment.logprob)
        {
            best = i;
        }
    }
    Ok(best)
}

fn candidate_alignments(
    session: &NatSession,
    utt: &Utterance,
    index: u64,
    params: &DecodeParams,
) -> Result<Vec<Alignment>> {
    let grid = session.grid();
    Ok(match params.mode {
        DecodeMode::Bpa => vec![best_path_align(grid)],
        DecodeMode::Bsa => vec![beam_search_align(grid, params.beam, params.bsa_path)?.alignment],
        DecodeMode::Esa => esa_sample(grid, &params.esa, index)?,
        DecodeMode::Oracle => {
            if utt.tokens.is_empty() {
                return Err(Error::EmptyReference);
            }
            vec![viterbi_align(grid, &utt.tokens)?]
        }
    })
}

/// Decode one utterance. `index` seeds the sampler; `at` is required by the
/// autoregressive ranker.
pub fn decode(
    model: &CassNat,
    utt: &Utterance,
    index: u64,
    params: &DecodeParams,
    at: Option<&AtModel>,
) -> Result<Hypothesis> {
    let feats = features_tensor(utt)?;
    let mut session = NatSession::new(model, &feats)?;
    let candidates = candidate_alignments(&session, utt, index, params)?;
    let mut at_session = match (params.ranker, at) {
        (Ranker::At, Some(m)) if candidates.len() > 1 => Some(AtSession::new(m, &feats)?),
        (Ranker::At, None) => return Err(Error::Config("the at ranker needs an autoregressive model".into())),
        _ => None,
    };
    let mut seen: HashMap<(Vec<usize>, Vec<usize>), usize> = HashMap::new();
    let mut hyps: Vec<Hypothesis> = Vec::with_capacity(candidates.len());
    let mut passes = 0;
    for alignment in candidates {
        let masks = match trigger_masks(&alignment.labels, model.config.extend_last) {
            Ok(m) => m,
            Err(Error::NoTokens) => {
                hyps.push(Hypothesis {
                    tokens: Vec::new(),
                    token_logprobs: Vec::new(),
                    alignment,
                    rank_score: f64::NEG_INFINITY,
                    mode: params.mode,
                    empty: true,
                    decoder_passes: 0,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let key = (masks.tokens.clone(), masks.boundaries.clone());
        if let Some(&j) = seen.get(&key) {
            let mut h = hyps[j].clone();
            h.alignment = alignment;
            hyps.push(h);
            continue;
        }
        let lp = session.decode(&masks)?;
        passes += 1;
        let tokens: Vec<usize> = (0..lp.rows()).map(|u| 1 + argmax(&lp.row(u)[1..])).collect();
        let token_logprobs: Vec<f64> = tokens.iter().enumerate().map(|(u, &y)| lp.row(u)[y]).collect();
        let rank_score = match at_session.as_mut() {
            Some(s) => s.score(&tokens)?,
            None => token_logprobs.iter().sum::<f64>() / tokens.len() as f64,
        };
        seen.insert(key, hyps.len());
        hyps.push(Hypothesis {
            tokens,
            token_logprobs,
            alignment,
            rank_score,
            mode: params.mode,
            empty: false,
            decoder_passes: 0,
        });
    }
    let mut best = hyps.swap_remove(rank_candidates(&hyps)?);
    best.decoder_passes = passes;
    Ok(best)
}

/// Greedy autoregressive transcription.
pub fn decode_at_greedy(model: &AtModel, utt: &Utterance) -> Result<Vec<usize>> {
    let feats = features_tensor(utt)?;
    let max_len = model.config.encoder_frames(feats.rows());
    AtSession::new(model, &feats)?.greedy(max_len)
}

/// Substitution, deletion and insertion counts of a minimum edit script.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.ref_len += o.ref_len;
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among minimum-cost
/// scripts the backtrace takes a diagonal step (match or substitution)
/// whenever one is optimal, so paired insert+delete never replaces a
/// substitution.
pub fn edit_ops(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let sub = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + sub == here {
                c.sub += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// `(S + D + I) / N`.
pub fn wer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_ops(hyp, reference).errors() as f64 / reference.len() as f64)
}

/// `(D + I) / N` between collapsed generated and oracle alignments.
pub fn mr(generated: &[usize], oracle: &[usize]) -> Result<f64> {
    let (g, o) = (collapse(generated), collapse(oracle));
    if o.is_empty() {
        return Err(Error::EmptyReference);
    }
    let c = edit_ops(&g, &o);
    Ok((c.del + c.ins) as f64 / o.len() as f64)
}

/// Fraction of `(generated, oracle)` alignment pairs whose collapsed lengths differ.
pub fn lper(pairs: &[(&[usize], &[usize])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let bad = pairs
        .iter()
        .filter(|(g, o)| collapse(g).len() != collapse(o).len())
        .count();
    bad as f64 / pairs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttRecord {
    pub id: String,
    pub hyp: Vec<usize>,
    pub reference: Vec<usize>,
    pub edits: EditCounts,
    /// Edits between the collapsed chosen alignment and the reference.
    pub alignment_edits: EditCounts,
    /// Collapsed alignment length minus reference length.
    pub length_error: i64,
    pub decoder_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub length_error: i64,
    pub count: usize,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub wer: f64,
    pub mr: f64,
    pub lper: f64,
    pub rtf: Option<f64>,
    pub utterances: Vec<UttRecord>,
    pub histogram: Vec<Bucket>,
}

fn record(utt: &Utterance, hyp: &[usize], alignment: Option<&[usize]>, passes: usize) -> UttRecord {
    let collapsed = alignment.map(collapse).unwrap_or_else(|| hyp.to_vec());
    UttRecord {
        id: utt.id.clone(),
        hyp: hyp.to_vec(),
        reference: utt.tokens.clone(),
        edits: edit_ops(hyp, &utt.tokens),
        alignment_edits: edit_ops(&collapsed, &utt.tokens),
        length_error: collapsed.len() as i64 - utt.tokens.len() as i64,
        decoder_passes: passes,
    }
}

/// Buckets by length error with each bucket's WER.
pub fn length_error_histogram(records: &[UttRecord]) -> Vec<Bucket> {
    let mut by: BTreeMap<i64, (usize, EditCounts)> = BTreeMap::new();
    for r in records {
        let e = by.entry(r.length_error).or_default();
        e.0 += 1;
        e.1.add(&r.edits);
    }
    by.into_iter()
        .map(|(length_error, (count, c))| Bucket {
            length_error,
            count,
            wer: c.errors() as f64 / c.ref_len.max(1) as f64,
        })
        .collect()
}

impl EvalReport {
    pub fn from_records(system: impl Into<String>, utterances: Vec<UttRecord>) -> Self {
        let mut total = EditCounts::default();
        let mut mismatch = 0;
        for r in &utterances {
            total.add(&r.edits);
            mismatch += r.alignment_edits.del + r.alignment_edits.ins;
        }
        let n = total.ref_len.max(1) as f64;
        let lper = if utterances.is_empty() {
            0.0
        } else {
            utterances.iter().filter(|r| r.length_error != 0).count() as f64 / utterances.len() as f64
        };
        Self {
            system: system.into(),
            wer: total.errors() as f64 / n,
            mr: mismatch as f64 / n,
            lper,
            rtf: None,
            histogram: length_error_histogram(&utterances),
            utterances,
        }
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("length_error,count,wer\n");
        for b in &self.histogram {
            let _ = writeln!(s, "{},{},{:.6}", b.length_error, b.count, b.wer);
        }
        s
    }

    /// Hypotheses as `id<TAB>tokens` lines.
    pub fn hypotheses_text(&self) -> String {
        let mut s = String::new();
        for r in &self.utterances {
            let toks: Vec<String> = r.hyp.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{}\t{}", r.id, toks.join(" "));
        }
        s
    }
}

/// Fixed-width comparison table, rates in percent.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut s = format!("{:<16} {:>8} {:>8} {:>8} {:>10}\n", "system", "WER(%)", "MR(%)", "LPER(%)", "RTF");
    s.push_str(&"-".repeat(54));
    s.push('\n');
    for r in reports {
        let rtf = r.rtf.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
        let _ = writeln!(
            s,
            "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>10}",
            r.system,
            100.0 * r.wer,
            100.0 * r.mr,
            100.0 * r.lper,
            rtf
        );
    }
    s
}

fn system_name(params: &DecodeParams) -> String {
    match params.mode {
        DecodeMode::Esa => format!("esa(S={})", params.esa.samples),
        m => m.to_string(),
    }
}

/// Decode and score a set; utterances run in parallel, results keep set order.
pub fn evaluate(
    model: &CassNat,
    utts: &[Utterance],
    params: &DecodeParams,
    at: Option<&AtModel>,
) -> Result<EvalReport> {
    let records = utts
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let h = decode(model, u, i as u64, params, at)?;
            Ok(record(u, &h.tokens, Some(&h.alignment.labels), h.decoder_passes))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(system_name(params), records))
}

/// Greedy autoregressive baseline over a set.
pub fn evaluate_at(model: &AtModel, utts: &[Utterance]) -> Result<EvalReport> {
    let records = utts
        .par_iter()
        .map(|u| Ok(record(u, &decode_at_greedy(model, u)?, None, 0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records("at-greedy", records))
}

/// Serial wall time of `run` over `utts` divided by their nominal audio
/// duration. The first utterance is decoded once beforehand as warm-up.
pub fn measure_rtf(utts: &[Utterance], mut run: impl FnMut(usize, &Utterance) -> Result<()>) -> Result<f64> {
    if let Some(u) = utts.first() {
        run(0, u)?;
    }
    let audio: f64 = utts.iter().map(|u| u.n_frames() as f64 * FRAME_SECONDS).sum();
    let start = Instant::now();
    for (i, u) in utts.iter().enumerate() {
        run(i, u)?;
    }
    Ok(start.elapsed().as_secs_f64() / audio.max(f64::MIN_POSITIVE))
}

pub fn measure_rtf_nat(model: &CassNat, utts: &[Utterance], params: &DecodeParams, at: Option<&AtModel>) -> Result<f64> {
    measure_rtf(utts, |i, u| decode(model, u, i as u64, params, at).map(drop))
}

pub fn measure_rtf_at(model: &AtModel, utts: &[Utterance]) -> Result<f64> {
    measure_rtf(utts, |_, u| decode_at_greedy(model, u).map(drop))
}
