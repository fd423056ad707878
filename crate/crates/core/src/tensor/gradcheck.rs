use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-12)
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(TensorError::NonScalarLoss(val.shape().to_vec()));
    }
    Ok(val.item())
}

/// Compare the tape gradient of scalar `f` at `x` with central differences
/// over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, &all, h, tol)
}

/// As [`grad_check`], restricted to the listed flat indices of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor, indices: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let y0 = tape.value(out).clone();
    tape.backward(out)?;
    let ad = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let again = eval(&f, x)?;
    if again.to_bits() != y0.item().to_bits() {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("non-deterministic function: {} vs {again}", y0.item()),
        });
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = ad.data()[i];
        let abs = (g - fd).abs();
        let rel = abs / (g.abs() + fd.abs() + 1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    Ok(report)
}
