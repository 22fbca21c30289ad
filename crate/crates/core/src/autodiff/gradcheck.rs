use super::graph::{Graph, Mode, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Gradients smaller than this on both sides are treated as agreeing.
pub const VANISHING_GRAD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < VANISHING_GRAD {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares backprop gradients of `f` against central differences for every
/// trainable entry of `store`. `f` builds a scalar loss inside the supplied
/// graph (always in eval mode, so dropout is off).
pub fn finite_difference_check<F>(f: F, store: &mut ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("finite-difference step {h} must be positive")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, store)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: "finite_difference_check".into(),
            });
        }
        Ok(v)
    };

    store.zero_grads();
    {
        let mut g = Graph::new(Mode::Eval);
        let loss = f(&mut g, store)?;
        g.backward(loss, store)?;
    }

    let mut params = Vec::new();
    for name in store.trainable_names() {
        let analytic: Vec<f32> = store.grad(&name).map(<[f32]>::to_vec).unwrap_or_default();
        let n = store.get(&name)?.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            let plus = (orig as f64 + h) as f32;
            let minus = (orig as f64 - h) as f32;
            store.get_mut(&name)?.data_mut()[i] = plus;
            let fp = eval(store);
            store.get_mut(&name)?.data_mut()[i] = minus;
            let fm = eval(store);
            store.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (plus as f64 - minus as f64);
            let a = analytic.get(i).copied().unwrap_or(0.0) as f64;
            worst = worst.max(relative_error(a, numeric));
        }
        params.push(ParamCheck {
            name,
            max_rel_error: worst,
            elements: n,
        });
    }
    store.clear_grads();
    let passed = params.iter().all(|p| p.max_rel_error <= tol);
    Ok(GradCheckReport { params, tol, passed })
}
