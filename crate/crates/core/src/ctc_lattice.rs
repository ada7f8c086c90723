//! Dynamic programming and sampling over the CTC output space.
//!
//! Everything here works in log space on a [`PosteriorGrid`]: the forward
//! (sum) recursion for the loss, the Viterbi (max) recursion for forced
//! alignment, per-frame argmax, prefix beam search and error-based sampling.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment_map::{collapse, BLANK};
use crate::error::{Error, Result};
use crate::numerics::kernels::{log_add_exp, masked_softmax_rows};
use crate::numerics::MaskMode;

/// Posteriors below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-frame token posteriors, `frames × classes`, class 0 = blank.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    frames: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl PosteriorGrid {
    pub fn new(frames: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != frames * classes || classes < 2 {
            return Err(Error::Shape(format!(
                "grid {frames}x{classes} with {} values",
                probs.len()
            )));
        }
        for (t, row) in probs.chunks(classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Shape(format!("frame {t}: probability outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Shape(format!("frame {t}: row sums to {s}")));
            }
        }
        Ok(Self {
            frames,
            classes,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), classes, rows.concat())
    }

    /// Row softmax of unnormalized scores.
    pub fn from_logits(frames: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        let probs = masked_softmax_rows(logits, frames, classes, None, MaskMode::PreSoftmax);
        Self::new(frames, classes, probs)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prob(&self, t: usize, k: usize) -> f64 {
        self.probs[t * self.classes + k]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    /// Floored log posterior.
    pub fn log_prob(&self, t: usize, k: usize) -> f64 {
        self.prob(t, k).max(PROB_FLOOR).ln()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
    }

    /// The two most probable classes of frame `t` (ties → lower id first).
    pub fn top2(&self, t: usize) -> [(usize, f64); 2] {
        let row = self.row(t);
        let mut best = (0, row[0]);
        let mut second = (usize::MAX, f64::NEG_INFINITY);
        for (k, &p) in row.iter().enumerate().skip(1) {
            if p > best.1 {
                second = best;
                best = (k, p);
            } else if p > second.1 {
                second = (k, p);
            }
        }
        [best, second]
    }

    pub fn path_logprob(&self, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .fold(0.0, |acc, (t, &k)| acc + self.log_prob(t, k))
    }

    /// One line per frame: `idx token prob` for the given alignment.
    pub fn debug_dump(&self, labels: &[usize]) -> String {
        let mut s = String::new();
        for (t, &k) in labels.iter().enumerate() {
            let _ = writeln!(s, "{} {} {:.6}", t, k, self.prob(t, k));
        }
        s
    }
}

/// Frame-level label sequence with its log posterior under the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub labels: Vec<usize>,
    pub logprob: f64,
}

impl Alignment {
    pub fn from_labels(grid: &PosteriorGrid, labels: Vec<usize>) -> Self {
        let logprob = grid.path_logprob(&labels);
        Self { labels, logprob }
    }

    pub fn collapsed(&self) -> Vec<usize> {
        collapse(&self.labels)
    }
}

/// Minimum number of frames needed to emit `labels` (a blank must separate
/// adjacent repeats).
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_feasible(frames: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyReference);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::TokenRange { id: bad, classes });
    }
    let needed = min_frames(labels);
    if needed > frames {
        return Err(Error::Infeasible {
            labels: labels.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

/// Label of extended-lattice state `s` (even states are blanks).
fn state_label(labels: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        BLANK
    } else {
        labels[s / 2]
    }
}

fn can_skip(labels: &[usize], s: usize) -> bool {
    s >= 2 && s % 2 == 1 && labels[s / 2] != labels[s / 2 - 1]
}

pub struct CtcForwardBackward {
    pub nll: f64,
    /// Posterior occupancy per `(frame, class)`: expected number of paths
    /// emitting `class` at `frame`, summing to one per frame.
    pub occupancy: Vec<f64>,
}

/// Forward-backward over the `2U+1` state lattice on log posteriors `logp`
/// (`frames × classes`, row major).
pub fn ctc_forward_backward(
    logp: &[f64],
    frames: usize,
    classes: usize,
    labels: &[usize],
) -> Result<CtcForwardBackward> {
    check_feasible(frames, classes, labels)?;
    let states = 2 * labels.len() + 1;
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| logp[t * classes + state_label(labels, s)];

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if can_skip(labels, s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            if a != ninf {
                alpha[t * states + s] = a + lp(t, s);
            }
        }
    }
    let last = (frames - 1) * states;
    let log_total = log_add_exp(alpha[last + states - 1], alpha[last + states - 2]);

    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = 0.0;
    beta[last + states - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| beta[(t + 1) * states + s2] + lp(t + 1, s2);
            let mut b = next(s);
            if s + 1 < states {
                b = log_add_exp(b, next(s + 1));
            }
            if s + 2 < states && can_skip(labels, s + 2) {
                b = log_add_exp(b, next(s + 2));
            }
            beta[t * states + s] = b;
        }
    }

    let mut occupancy = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..states {
            let v = alpha[t * states + s] + beta[t * states + s];
            if v != ninf {
                occupancy[t * classes + state_label(labels, s)] += (v - log_total).exp();
            }
        }
    }
    Ok(CtcForwardBackward {
        nll: -log_total,
        occupancy,
    })
}

/// Negative log-likelihood of `labels`, summed over every alignment that
/// collapses to it.
pub fn ctc_loss(grid: &PosteriorGrid, labels: &[usize]) -> Result<f64> {
    let logp = grid.log_probs();
    Ok(ctc_forward_backward(&logp, grid.frames, grid.classes, labels)?.nll)
}

/// Most probable alignment that collapses exactly to `labels`.
///
/// Ties prefer staying in the current lattice state, then the blank
/// predecessor; at the final frame the blank end state wins ties.
pub fn viterbi_align(grid: &PosteriorGrid, labels: &[usize]) -> Result<Alignment> {
    check_feasible(grid.frames, grid.classes, labels)?;
    let frames = grid.frames;
    let states = 2 * labels.len() + 1;
    let ninf = f64::NEG_INFINITY;
    let logp = grid.log_probs();
    let lp = |t: usize, s: usize| logp[t * grid.classes + state_label(labels, s)];

    let mut delta = vec![ninf; frames * states];
    let mut back = vec![0usize; frames * states];
    delta[0] = lp(0, 0);
    delta[1] = lp(0, 1);
    for t in 1..frames {
        for s in 0..states {
            let prev = &delta[(t - 1) * states..t * states];
            let mut best = prev[s];
            let mut arg = s;
            if s >= 1 && prev[s - 1] > best {
                best = prev[s - 1];
                arg = s - 1;
            }
            if can_skip(labels, s) && prev[s - 2] > best {
                best = prev[s - 2];
                arg = s - 2;
            }
            if best != ninf {
                delta[t * states + s] = best + lp(t, s);
                back[t * states + s] = arg;
            }
        }
    }
    let last = (frames - 1) * states;
    let mut s = if delta[last + states - 1] >= delta[last + states - 2] {
        states - 1
    } else {
        states - 2
    };
    let logprob = delta[last + s];
    let mut path = vec![0; frames];
    for t in (0..frames).rev() {
        path[t] = state_label(labels, s);
        s = back[t * states + s];
    }
    Ok(Alignment {
        labels: path,
        logprob,
    })
}

/// Per-frame argmax (ties → lowest id).
pub fn best_path_align(grid: &PosteriorGrid) -> Alignment {
    let labels: Vec<usize> = (0..grid.frames).map(|t| grid.top2(t)[0].0).collect();
    Alignment::from_labels(grid, labels)
}

/// Which frame path represents the winning prefix of a beam search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BsaPath {
    /// Best frame path tracked alongside each prefix during the search.
    #[default]
    Tracked,
    /// Forced alignment of the winning prefix.
    Realigned,
}

impl std::str::FromStr for BsaPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracked" => Ok(Self::Tracked),
            "realigned" => Ok(Self::Realigned),
            o => Err(Error::Config(format!("unknown bsa_path `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamSearchOutput {
    pub alignment: Alignment,
    pub prefix: Vec<usize>,
    /// Log of the summed probability of all searched paths that collapse to `prefix`.
    pub score: f64,
}

#[derive(Clone, Copy)]
struct Back {
    beam: usize,
    blank: bool,
}

struct Cand {
    prefix: Vec<usize>,
    lp_b: f64,
    lp_nb: f64,
    vit_b: f64,
    vit_nb: f64,
    back_b: Option<Back>,
    back_nb: Option<Back>,
}

impl Cand {
    fn total(&self) -> f64 {
        log_add_exp(self.lp_b, self.lp_nb)
    }

    /// Best tracked path state; blank wins ties.
    fn best_state(&self) -> (f64, bool) {
        if self.vit_b >= self.vit_nb {
            (self.vit_b, true)
        } else {
            (self.vit_nb, false)
        }
    }
}

/// CTC prefix beam search keeping `beam` prefixes per frame.
pub fn beam_search_align(grid: &PosteriorGrid, beam: usize, path: BsaPath) -> Result<BeamSearchOutput> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let ninf = f64::NEG_INFINITY;
    let logp = grid.log_probs();
    let classes = grid.classes;
    let mut beams = vec![Cand {
        prefix: Vec::new(),
        lp_b: 0.0,
        lp_nb: ninf,
        vit_b: 0.0,
        vit_nb: ninf,
        back_b: None,
        back_nb: None,
    }];
    // history[t][i] = (back_b, back_nb, last label) of beam i after frame t
    let mut history: Vec<Vec<(Option<Back>, Option<Back>, usize)>> = Vec::with_capacity(grid.frames);

    for t in 0..grid.frames {
        let row = &logp[t * classes..(t + 1) * classes];
        let mut next: Vec<Cand> = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut slot = |prefix: Vec<usize>, next: &mut Vec<Cand>| -> usize {
            *index.entry(prefix).or_insert_with_key(|p| {
                next.push(Cand {
                    prefix: p.clone(),
                    lp_b: ninf,
                    lp_nb: ninf,
                    vit_b: ninf,
                    vit_nb: ninf,
                    back_b: None,
                    back_nb: None,
                });
                next.len() - 1
            })
        };
        let from = |i: usize, blank: bool| (t > 0).then_some(Back { beam: i, blank });

        for (i, b) in beams.iter().enumerate() {
            let total = b.total();
            let (vbest, vblank) = b.best_state();
            let last = b.prefix.last().copied();

            let j = slot(b.prefix.clone(), &mut next);
            let c = &mut next[j];
            c.lp_b = log_add_exp(c.lp_b, total + row[BLANK]);
            if vbest + row[BLANK] > c.vit_b {
                c.vit_b = vbest + row[BLANK];
                c.back_b = from(i, vblank);
            }
            if let Some(l) = last {
                c.lp_nb = log_add_exp(c.lp_nb, b.lp_nb + row[l]);
                if b.vit_nb + row[l] > c.vit_nb {
                    c.vit_nb = b.vit_nb + row[l];
                    c.back_nb = from(i, false);
                }
            }

            for k in 1..classes {
                let mut p = b.prefix.clone();
                p.push(k);
                let j = slot(p, &mut next);
                let c = &mut next[j];
                let (lp, vit, vb) = if Some(k) == last {
                    (b.lp_b, b.vit_b, true)
                } else {
                    (total, vbest, vblank)
                };
                c.lp_nb = log_add_exp(c.lp_nb, lp + row[k]);
                if vit + row[k] > c.vit_nb {
                    c.vit_nb = vit + row[k];
                    c.back_nb = from(i, vb);
                }
            }
        }

        let mut order: Vec<usize> = (0..next.len()).collect();
        order.sort_by(|&a, &b| next[b].total().total_cmp(&next[a].total()).then(a.cmp(&b)));
        order.truncate(beam);
        let mut kept: Vec<Option<Cand>> = next.into_iter().map(Some).collect();
        beams = order.iter().map(|&j| kept[j].take().unwrap()).collect();
        history.push(
            beams
                .iter()
                .map(|c| (c.back_b, c.back_nb, c.prefix.last().copied().unwrap_or(BLANK)))
                .collect(),
        );
    }

    let (best_idx, best) = beams
        .iter()
        .enumerate()
        .fold(None::<(usize, &Cand)>, |acc, (i, c)| match acc {
            Some((_, a)) if a.total() >= c.total() => acc,
            _ => Some((i, c)),
        })
        .expect("at least one beam");
    let prefix = best.prefix.clone();
    let score = best.total();

    let alignment = match path {
        BsaPath::Realigned if prefix.is_empty() => Alignment::from_labels(grid, vec![BLANK; grid.frames]),
        BsaPath::Realigned if min_frames(&prefix) <= grid.frames => viterbi_align(grid, &prefix)?,
        _ => {
            let (_, mut blank) = best.best_state();
            let mut idx = best_idx;
            let mut labels = vec![BLANK; grid.frames];
            for t in (0..grid.frames).rev() {
                let (bb, bnb, last) = history[t][idx];
                labels[t] = if blank { BLANK } else { last };
                match if blank { bb } else { bnb } {
                    Some(b) => {
                        idx = b.beam;
                        blank = b.blank;
                    }
                    None => debug_assert_eq!(t, 0),
                }
            }
            Alignment::from_labels(grid, labels)
        }
    };
    Ok(BeamSearchOutput {
        alignment,
        prefix,
        score,
    })
}

/// How a selected frame chooses between its two most probable tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EsaDistribution {
    #[default]
    Top2Uniform,
    Top2Renormalized,
}

impl std::str::FromStr for EsaDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top2-uniform" => Ok(Self::Top2Uniform),
            "top2-renormalized" => Ok(Self::Top2Renormalized),
            o => Err(Error::Config(format!("unknown esa distribution `{o}`"))),
        }
    }
}

impl std::fmt::Display for EsaDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Top2Uniform => "top2-uniform",
            Self::Top2Renormalized => "top2-renormalized",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsaConfig {
    pub threshold: f64,
    pub samples: usize,
    pub distribution: EsaDistribution,
    pub seed: u64,
}

impl Default for EsaConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            samples: 50,
            distribution: EsaDistribution::Top2Uniform,
            seed: 0,
        }
    }
}

impl EsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("esa samples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("esa threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Frames whose top-1 posterior falls below `threshold`.
pub fn selected_frames(grid: &PosteriorGrid, threshold: f64) -> Vec<usize> {
    (0..grid.frames).filter(|&t| grid.top2(t)[0].1 < threshold).collect()
}

/// splitmix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Error-based alignment sampling.
///
/// Sample 0 is always the best path. Every other sample keeps the top-1 label
/// on confident frames and draws from the top-2 labels on selected frames,
/// using a generator seeded from `(cfg.seed, utterance, k)`.
pub fn esa_sample(grid: &PosteriorGrid, cfg: &EsaConfig, utterance: u64) -> Result<Vec<Alignment>> {
    cfg.validate()?;
    let bpa = best_path_align(grid);
    let selected = selected_frames(grid, cfg.threshold);
    let top2: Vec<[(usize, f64); 2]> = selected.iter().map(|&t| grid.top2(t)).collect();
    let base = mix_seed(cfg.seed, utterance);
    let mut out = Vec::with_capacity(cfg.samples);
    out.push(bpa.clone());
    for k in 1..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base, k as u64));
        let mut labels = bpa.labels.clone();
        for (&t, &[(l1, p1), (l2, p2)]) in selected.iter().zip(&top2) {
            let keep_first = match cfg.distribution {
                EsaDistribution::Top2Uniform => rng.random::<f64>() < 0.5,
                EsaDistribution::Top2Renormalized => rng.random::<f64>() < p1 / (p1 + p2),
            };
            labels[t] = if keep_first { l1 } else { l2 };
        }
        out.push(Alignment::from_labels(grid, labels));
    }
    Ok(out)
}
