//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{ParamStore, Tape, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic (fix any dropout seed inside it).
/// Outputs of `stop_gradient` are held at their unperturbed values. At most
/// `per_param` randomly chosen entries of each parameter are probed. The
/// relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients<Fun>(
    store: &ParamStore<f64>,
    loss_fn: Fun,
    eps: f64,
    floor: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let (analytic, pinned) = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let pinned = tape.detached_values().to_vec();
        (tape.backward(loss)?, pinned)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_pinned_detached(s, pinned.clone());
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        for i in picks {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let ana = analytic.get(id).data()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = ana;
                report.numeric = num;
            }
        }
    }
    Ok(report)
}
