use super::{NnError, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged on absolute error instead. A central
    /// difference cannot resolve gradients much below `eps * |f| / step`
    /// (about 1e-10 for an objective of order 10 at step 1e-5), so the floor
    /// sits well above that.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares tape gradients of the scalar `f` with central finite differences
/// for every entry of every parameter in `store`.
pub fn grad_check<F>(f: F, store: &ParamStore, cfg: GradCheckConfig) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NnError>,
{
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(NnError::NonFinite(format!("grad_check objective = {v}")));
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if !tape.value(out).item().is_finite() {
        return Err(NnError::NonFinite("grad_check objective".into()));
    }
    let analytic = tape.backward(out)?.param_grads(store);

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let mut check = ParamCheck {
            name: p.name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[id.index()].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel > check.max_rel_err || i == 0 {
                check.max_rel_err = check.max_rel_err.max(rel);
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tol,
        max_rel_err,
        params,
    })
}
