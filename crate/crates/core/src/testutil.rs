//! Finite-difference gradient checking shared by unit tests.

use crate::numerics::{ParamStore, Tape, Var};

/// Relative error with a small absolute floor so near-zero gradients do not
/// blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare tape gradients with central differences on the listed
/// `(param index, element)` pairs, or every element when `coords` is `None`.
pub fn check_grads<F>(store: &ParamStore, f: F, coords: Option<&[(usize, usize)]>) -> f64
where
    F: for<'a> Fn(&mut Tape<'a>) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape);
    let grads = tape.backward(loss).unwrap();
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .ids()
                .flat_map(|id| (0..store.get(id).len()).map(move |i| (id.index(), i)))
                .collect();
            &all
        }
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(p, i) in coords {
        let id = store.ids().nth(p).unwrap();
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += delta;
            let mut t = Tape::new(&s);
            let l = f(&mut t);
            t.value(l).item()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let e = rel_err(analytic, numeric);
        assert!(
            e < 1e-4,
            "param {} [{i}]: analytic {analytic} vs numeric {numeric} (rel {e})",
            store.name(id)
        );
        worst = worst.max(e);
    }
    worst
}
