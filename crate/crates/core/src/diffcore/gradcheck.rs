//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::exec::Exec;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; tensors with fewer entries are checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
    pub exec: Exec,
    /// Test hook forwarded to [`Graph::inject_gradient_fault`] for the analytic pass.
    pub fault: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 50,
            seed: 0,
            exec: Exec::default(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `f` with central differences.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
{
    let mut store = params.clone();
    store.zero_grad();
    let mut g = Graph::with_exec(opts.exec);
    if let Some(factor) = opts.fault {
        g.inject_gradient_fault(factor);
    }
    let loss = f(&mut g, &store)?;
    g.backward(loss, &mut store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, p) in store.iter() {
        let n = p.value.len();
        if n <= opts.coords_per_tensor {
            coords.extend((0..n).map(|i| (name.clone(), i)));
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            idx.sort_unstable();
            coords.extend(idx.into_iter().map(|i| (name.clone(), i)));
        }
    }

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_exec(Exec::Sequential);
        let v = f(&mut g, s)?;
        Ok(g.scalar(v))
    };
    let h = opts.step;
    let numeric: Vec<Result<f64>> = opts.exec.map(coords.len(), |i| {
        let (name, idx) = &coords[i];
        let mut s = params.clone();
        let orig = s.get(name).unwrap().value[*idx];
        s.get_mut(name).unwrap().value[*idx] = orig + h;
        let plus = eval(&s)?;
        s.get_mut(name).unwrap().value[*idx] = orig - h;
        let minus = eval(&s)?;
        Ok((plus - minus) / (2.0 * h))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: coords.len(),
    };
    for ((name, idx), num) in coords.into_iter().zip(numeric) {
        let num = num?;
        let ana = store.get(&name).unwrap().grad.as_ref().unwrap()[idx];
        let err = relative_error(ana, num);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.analytic_at_worst = ana;
            report.numeric_at_worst = num;
            report.worst = Some((name, idx));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut store = ParamStore::new();
        store.insert("theta", vec![1], vec![3.0]).unwrap();
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let t = g.param(s, "theta")?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        };
        let r = grad_check(f, &store, &GradCheckOptions::default()).unwrap();
        assert!((r.analytic_at_worst - 6.0).abs() < 1e-9);
        assert!((r.numeric_at_worst - 6.0).abs() < 1e-9);
        assert!(r.max_rel_err < 1e-9);

        let bad = GradCheckOptions {
            fault: Some(1.01),
            ..Default::default()
        };
        assert!(grad_check(f, &store, &bad).unwrap().max_rel_err > 1e-3);
    }
}
