//! Central finite-difference gradient checking.

use super::{Fault, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference formula for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²)
    #[default]
    ThreePoint,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, error O(h⁴)
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per parameter tensor.
    pub max_entries: Option<usize>,
    /// Corrupt the analytic pass (negative control).
    pub fault: Option<Fault>,
    /// Times the step is divided by 10 when a probe lands on a different
    /// ReLU/max branch than the base point.
    pub refinements: u32,
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
            fault: None,
            refinements: 2,
            stencil: Stencil::ThreePoint,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries skipped because every probe step crossed a kink.
    pub kinks: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `f`'s analytic gradients against central differences with the given step and tolerance.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let named: Vec<(String, Tensor)> = params
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("param{i}"), t.clone()))
        .collect();
    let opts = GradCheckOptions {
        step,
        tol,
        ..Default::default()
    };
    grad_check_named(f, &named, &opts)
}

pub fn grad_check_named<F>(f: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let mut current: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let forward = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok((v.data()[0], g.branch_signature()))
    };

    let base = forward(&current)?;
    if forward(&current)? != base {
        return Err(Error::contract("grad_check function is not deterministic"));
    }

    let mut g = match opts.fault {
        Some(fault) => Graph::with_fault(fault),
        None => Graph::new(),
    };
    let vars: Vec<Var> = current.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    drop(g);

    let mut report = CheckReport {
        step: opts.step,
        tol: opts.tol,
        params: Vec::with_capacity(params.len()),
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let n = current[p].numel();
        let stride = match opts.max_entries {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            kinks: 0,
            passed: true,
        };
        for i in (0..n).step_by(stride) {
            let orig = current[p].data()[i];
            let mut numeric = None;
            let mut h = opts.step;
            let offsets: &[f64] = match opts.stencil {
                Stencil::ThreePoint => &[1.0, -1.0],
                Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
            };
            for _ in 0..=opts.refinements {
                let mut values = [0.0; 4];
                let mut smooth = true;
                for (slot, &o) in offsets.iter().enumerate() {
                    current[p].data_mut()[i] = orig + o * h;
                    let (v, sig) = forward(&current)?;
                    values[slot] = v;
                    smooth &= sig == base.1;
                }
                current[p].data_mut()[i] = orig;
                if smooth {
                    let d1 = values[0] - values[1];
                    numeric = Some(match opts.stencil {
                        Stencil::ThreePoint => d1 / (2.0 * h),
                        Stencil::FivePoint => (8.0 * d1 - (values[2] - values[3])) / (12.0 * h),
                    });
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                check.kinks += 1;
                continue;
            };
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || check.checked == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            check.checked += 1;
        }
        check.passed = check.max_rel_error <= opts.tol;
        report.params.push(check);
    }
    Ok(report)
}
