//! Independent oracles for the integration and acceptance suites. Nothing in
//! here calls into the lattice recursions it is used to check.
#![allow(dead_code)]

use cassnat::ctc_lattice::PosteriorGrid;
use cassnat::numerics::{Grads, ParamStore};
use cassnat::synth_data::Utterance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random grid. With `ties`, about half the rows are exactly uniform: every
/// label scores the same float there, so tied paths have bit-identical sums.
pub fn random_grid(rng: &mut ChaCha8Rng, frames: usize, classes: usize, ties: bool) -> PosteriorGrid {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            if ties && rng.random_bool(0.5) {
                return vec![1.0 / classes as f64; classes];
            }
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|r| r / z).collect();
            // absorb rounding so rows sum to one as closely as possible
            let s: f64 = row.iter().sum();
            row[0] += 1.0 - s;
            row
        })
        .collect();
    PosteriorGrid::from_rows(&rows).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(1..=vocab)).collect()
}

/// Every label sequence of length `frames` over `classes` symbols.
pub fn all_paths(frames: usize, classes: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = classes.pow(frames as u32);
    (0..total).map(move |mut n| {
        let mut p = vec![0; frames];
        for slot in p.iter_mut().rev() {
            *slot = n % classes;
            n /= classes;
        }
        p
    })
}

pub fn oracle_collapse(path: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, &l) in path.iter().enumerate() {
        if l != 0 && (i == 0 || path[i - 1] != l) {
            out.push(l);
        }
    }
    out
}

pub fn path_score(grid: &PosteriorGrid, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &k) in path.iter().enumerate() {
        s += grid.prob(t, k).max(1e-12).ln();
    }
    s
}

pub fn path_prob(grid: &PosteriorGrid, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &k)| grid.prob(t, k)).product()
}

pub fn brute_ctc_nll(grid: &PosteriorGrid, y: &[usize]) -> f64 {
    let total: f64 = all_paths(grid.frames(), grid.classes())
        .filter(|p| oracle_collapse(p) == y)
        .map(|p| path_prob(grid, &p))
        .sum();
    -total.ln()
}

/// Lattice state index of every frame of a path that collapses to `y`:
/// blanks before token `u` sit in state `2u`, token `u` in `2u + 1`.
fn state_sequence(path: &[usize]) -> Vec<usize> {
    let mut emitted = 0usize;
    let mut out = Vec::with_capacity(path.len());
    for (i, &l) in path.iter().enumerate() {
        if l == 0 {
            out.push(2 * emitted);
        } else {
            if i == 0 || path[i - 1] != l {
                emitted += 1;
            }
            out.push(2 * emitted - 1);
        }
    }
    out
}

/// Max-score path collapsing to `y`. Exact ties go to the path whose state
/// sequence, read from the last frame backwards, is lexicographically largest.
pub fn brute_viterbi(grid: &PosteriorGrid, y: &[usize]) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64, Vec<usize>)> = None;
    for p in all_paths(grid.frames(), grid.classes()) {
        if oracle_collapse(&p) != y {
            continue;
        }
        let s = path_score(grid, &p);
        let mut key = state_sequence(&p);
        key.reverse();
        let better = match &best {
            None => true,
            Some((_, bs, bk)) => s > *bs || (s == *bs && key > *bk),
        };
        if better {
            best = Some((p, s, key));
        }
    }
    let (p, s, _) = best.expect("feasible");
    (p, s)
}

/// Best collapsed sequence by summed probability, its log probability and
/// the most probable single path that produces it.
pub fn brute_best_prefix(grid: &PosteriorGrid) -> (Vec<usize>, f64, Vec<usize>) {
    let mut sums: std::collections::BTreeMap<Vec<usize>, (f64, f64, Vec<usize>)> = Default::default();
    for p in all_paths(grid.frames(), grid.classes()) {
        let pr = path_prob(grid, &p);
        let e = sums.entry(oracle_collapse(&p)).or_insert((0.0, -1.0, Vec::new()));
        e.0 += pr;
        if pr > e.1 {
            e.1 = pr;
            e.2 = p;
        }
    }
    let (prefix, (total, _, path)) = sums
        .into_iter()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .unwrap();
    (prefix, total.ln(), path)
}

pub fn min_frames(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Plain Levenshtein distance (unit costs).
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central differences of `loss` against `grads` on the listed
/// `(param index, element)` pairs. Returns the worst relative error.
pub fn fd_check(
    store: &ParamStore,
    grads: &Grads,
    coords: &[(usize, usize)],
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(p, i) in coords {
        let id = store.ids().nth(p).unwrap();
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += delta;
            loss(&s)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Every element of every parameter.
pub fn all_coords(store: &ParamStore) -> Vec<(usize, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id.index(), i)))
        .collect()
}

/// `n` distinct coordinates spread over the parameters.
pub fn sample_coords(store: &ParamStore, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    let all = all_coords(store);
    let mut picked: Vec<(usize, usize)> = Vec::new();
    while picked.len() < n.min(all.len()) {
        let c = all[r.random_range(0..all.len())];
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// Small utterances with known tokens: every token is a `dur`-frame run of
/// its own mean vector plus noise.
pub fn toy_utterances(n: usize, d_feat: usize, vocab: usize, seed: u64) -> Vec<Utterance> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let len = r.random_range(2..=4);
            let tokens: Vec<usize> = (0..len).map(|_| r.random_range(1..=vocab)).collect();
            let mut frames = Vec::new();
            let mut span_ends = Vec::new();
            for &t in &tokens {
                let dur = r.random_range(8..=12);
                for _ in 0..dur {
                    for c in 0..d_feat {
                        let base = if c % vocab == t % vocab { 1.5 } else { 0.0 };
                        frames.push((base + r.random_range(-0.3..0.3)) as f32);
                    }
                }
                span_ends.push(frames.len() / d_feat);
            }
            Utterance {
                id: format!("toy-{i}"),
                d_feat,
                frames,
                tokens,
                span_ends,
            }
        })
        .collect()
}
