//! Central finite-difference gradient checks in 64-bit precision.

use crate::{Graph, NumericsError, ParamStore, Tensor, Var};

/// Step used by all finite-difference checks.
pub const FD_STEP: f64 = 1e-3;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Checks the gradient of a scalar function of several input tensors.
/// Returns the worst per-input relative error.
pub fn check_inputs<E: From<NumericsError>>(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
) -> Result<f64, E> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.gradients(out)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
}

/// Checks parameter gradients of a scalar loss built from `store`.
///
/// At most `max_coords` evenly spaced coordinates are perturbed per parameter.
pub fn check_params<E: From<NumericsError>>(
    store: &mut ParamStore<f64>,
    max_coords: usize,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
) -> Result<Vec<ParamCheck>, E> {
    store.zero_grad();
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out, store)?;
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::inference();
        let out = f(&mut g, s)?;
        Ok(scalar_of(&g, out))
    };
    let ids: Vec<_> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.numel();
        let picks: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|i| i * n / max_coords).collect()
        };
        let analytic: Vec<f64> = picks.iter().map(|&j| store.get(id).grad.data()[j]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords: picks.len(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(report)
}
