//! Central finite-difference checks for graph gradients.
//!
//! The numeric side never touches the tape's backward pass: it re-evaluates
//! the forward function in inference graphs with perturbed values.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Allowed relative error.
    pub rel_tol: f64,
    /// Denominator floor so vanishing gradients compare absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            rel_tol: 1e-3,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.rel_err <= self.rel_tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} entries, max rel err {:.3e} (tol {:.1e})",
            self.entries.len(),
            self.max_rel_err(),
            self.rel_tol
        )?;
        for e in self.entries.iter().filter(|e| e.rel_err > self.rel_tol) {
            writeln!(
                f,
                "  {}: analytic {:.9e} numeric {:.9e} rel {:.3e}",
                e.label, e.analytic, e.numeric, e.rel_err
            )?;
        }
        Ok(())
    }
}

/// Checks the gradient with respect to every entry of every input tensor.
pub fn check_inputs(
    check: &GradCheck,
    inputs: &[(Vec<f64>, Vec<usize>)],
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheckReport {
    let eval = |vals: &[(Vec<f64>, Vec<usize>)]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|(v, s)| g.constant(v.clone(), s)).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| g.input(v.clone(), s)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut work = inputs.to_vec();
    let mut entries = Vec::new();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec);
        for j in 0..inputs[t].0.len() {
            let orig = work[t].0[j];
            work[t].0[j] = orig + check.eps;
            let up = eval(&work);
            work[t].0[j] = orig - check.eps;
            let down = eval(&work);
            work[t].0[j] = orig;
            let numeric = (up - down) / (2.0 * check.eps);
            let a = analytic.as_ref().map_or(0.0, |v| v[j]);
            entries.push(GradEntry {
                label: format!("input{t}[{j}]"),
                analytic: a,
                numeric,
                rel_err: check.relative_error(a, numeric),
            });
        }
    }
    GradCheckReport {
        entries,
        rel_tol: check.rel_tol,
    }
}

/// Draws `n` distinct scalar entries among the parameters accepted by
/// `filter`, spread across tensors.
pub fn sample_param_entries<R: Rng>(
    store: &ParamStore,
    n: usize,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .flat_map(|(id, p)| (0..p.value.len()).map(move |j| (id, j)))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all.sort();
    all
}

/// Checks parameter gradients of a scalar function at the sampled entries.
pub fn check_params(
    check: &GradCheck,
    store: &mut ParamStore,
    samples: &[(ParamId, usize)],
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradCheckReport {
    let analytic: Vec<f64> = {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        let grads = g.backward(out);
        samples
            .iter()
            .map(|&(id, j)| grads.param(id).map_or(0.0, |v| v[j]))
            .collect()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::inference();
        let out = f(&mut g, store);
        g.scalar(out)
    };
    let mut entries = Vec::with_capacity(samples.len());
    for (&(id, j), &a) in samples.iter().zip(&analytic) {
        let orig = store.values(id)[j];
        store.values_mut(id)[j] = orig + check.eps;
        let up = eval(store);
        store.values_mut(id)[j] = orig - check.eps;
        let down = eval(store);
        store.values_mut(id)[j] = orig;
        let numeric = (up - down) / (2.0 * check.eps);
        entries.push(GradEntry {
            label: format!("{}[{j}]", store.get(id).name),
            analytic: a,
            numeric,
            rel_err: check.relative_error(a, numeric),
        });
    }
    GradCheckReport {
        entries,
        rel_tol: check.rel_tol,
    }
}
