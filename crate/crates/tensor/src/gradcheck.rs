//! Central finite-difference gradient checks, run in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub eps: f64,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((name.to_string(), coord, analytic, numeric));
        }
    }
}

/// Checks d f / d inputs for a scalar-valued `f` over every input coordinate.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.item(out)
    };
    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].shape().to_vec()));
        for c in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[c];
            work[ti].data_mut()[c] = orig + opts.eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[c] = orig - opts.eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            report.record(
                &format!("input{ti}"),
                c,
                analytic.data()[c],
                numeric,
                opts.floor,
            );
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar `f`. With `coords_per_param = Some(n)`,
/// `n` coordinates per tensor are sampled with `seed`; otherwise all are checked.
pub fn check_params<F>(
    store: &ParamStore,
    f: F,
    coords_per_param: Option<usize>,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut store = store.clone();
    store.zero_grad();
    let mut g = Graph::new(Precision::F64);
    let out = f(&mut g, &store)?;
    g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    g.accumulate_into(&mut analytic)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).numel();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            let mut eval = |v: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[c] = v;
                let mut g = Graph::new(Precision::F64);
                let out = f(&mut g, &store)?;
                g.item(out)
            };
            let fp = eval(orig + opts.eps)?;
            let fm = eval(orig - opts.eps)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let name = store.name(id).to_string();
            report.record(&name, c, analytic.grad(id).data()[c], numeric, opts.floor);
        }
    }
    Ok(report)
}
