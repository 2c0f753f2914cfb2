//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::parallel::{self, Parallelism};
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors, so an exactly-zero gradient is
/// judged by absolute error against rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-4;
/// Largest share of coordinates that may sit on a kink before the check fails.
pub const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub parallelism: Parallelism,
    /// Flips the sign of every analytic gradient before comparison. Only
    /// useful for confirming that the checker can fail.
    #[doc(hidden)]
    pub flip_analytic_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            parallelism: Parallelism::default(),
            flip_analytic_sign: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    /// Coordinates where a relu, abs or max switches branch even at a
    /// hundredth of the step; excluded from the comparison.
    pub kinks: usize,
    pub coords: usize,
    pub threshold: f64,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.diagnostic.is_none()
            && self.params.iter().all(|p| p.max_rel_error <= self.threshold)
            && self.kinks as f64 <= MAX_KINK_FRACTION * self.coords as f64
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            let mark = if p.max_rel_error <= self.threshold { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{mark:4} {:<28} max_rel={:.3e} (idx {}: analytic {:.6e}, numeric {:.6e})",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        if let Some(d) = &self.diagnostic {
            writeln!(f, "FAIL {d}")?;
        }
        if self.kinks > 0 {
            writeln!(f, "skipped {} of {} coordinates on kinks", self.kinks, self.coords)?;
        }
        write!(
            f,
            "{} (threshold {:.1e}, worst {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.threshold,
            self.max_rel_error()
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn eval_loss<F>(model_fn: &F, params: &ParamSet) -> Result<(f64, u64)>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let loss = model_fn(&tape, &bound)?.item();
    Ok((loss, tape.branch_signature()))
}

/// Compares tape gradients of `model_fn` with central differences over every
/// scalar parameter. `model_fn` must be deterministic.
pub fn grad_check<F>(model_fn: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>> + Sync + Send,
{
    let analytic: Vec<(String, Vec<f64>)> = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = model_fn(&tape, &bound)?;
        tape.backward(loss)?;
        bound
            .iter()
            .map(|(name, var)| {
                let mut g = tape.grad(var).into_data();
                if opts.flip_analytic_sign {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
                (name.to_string(), g)
            })
            .collect()
    };

    let (base, base_sig) = eval_loss(&model_fn, params)?;
    let (again, _) = eval_loss(&model_fn, params)?;
    if base.to_bits() != again.to_bits() {
        return Ok(GradCheckReport {
            params: Vec::new(),
            kinks: 0,
            coords: 0,
            threshold: opts.tolerance,
            diagnostic: Some(format!(
                "model function is not deterministic: loss {base:.17e} then {again:.17e}"
            )),
        });
    }

    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(p, (_, g))| (0..g.len()).map(move |i| (p, i)))
        .collect();
    let h = opts.step;
    let chunked: Vec<Result<Vec<Option<f64>>>> = parallel::map_chunks(coords.len(), 256, opts.parallelism, |range| {
        let mut local = params.clone();
        let mut out = Vec::with_capacity(range.len());
        for &(p, i) in &coords[range] {
            let name = &analytic[p].0;
            let orig = local.value(name)?.data()[i];
            let mut found = None;
            // a kink inside the step: retry closer in before giving up
            for step in [h, h / 10.0, h / 100.0] {
                local.value_mut(name)?.data_mut()[i] = orig + step;
                let (plus, plus_sig) = eval_loss(&model_fn, &local)?;
                local.value_mut(name)?.data_mut()[i] = orig - step;
                let (minus, minus_sig) = eval_loss(&model_fn, &local)?;
                local.value_mut(name)?.data_mut()[i] = orig;
                if plus_sig == base_sig && minus_sig == base_sig {
                    found = Some((plus - minus) / (2.0 * step));
                    break;
                }
            }
            out.push(found);
        }
        Ok(out)
    });
    let mut numeric = Vec::with_capacity(coords.len());
    for chunk in chunked {
        numeric.extend(chunk?);
    }

    let mut reports: Vec<ParamError> = analytic
        .iter()
        .map(|(name, _)| ParamError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    let mut kinks = 0;
    for (&(p, i), &num) in coords.iter().zip(&numeric) {
        let Some(num) = num else {
            kinks += 1;
            continue;
        };
        let ana = analytic[p].1[i];
        let err = relative_error(ana, num);
        let r = &mut reports[p];
        if err > r.max_rel_error {
            r.max_rel_error = err;
            r.worst_index = i;
            r.analytic = ana;
            r.numeric = num;
        }
    }
    Ok(GradCheckReport {
        params: reports,
        kinks,
        coords: coords.len(),
        threshold: opts.tolerance,
        diagnostic: None,
    })
}
