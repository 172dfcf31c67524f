use crate::error::{CoreError, Result};
use crate::tensor::{ParamSet, Tape, Tensor};

impl ParamSet {
    /// Copy of this set with every tensor registered as a leaf on `tape`.
    pub fn leafed(&self, tape: &Tape) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            out.add(name, tape.leaf(value)).expect("names already unique");
        }
        out
    }
}

/// Central finite-difference check of a scalar function's analytic gradients.
///
/// `f` must build the loss from the given parameter set on the given tape;
/// the same closure is used untracked for the difference quotients, so any
/// data-dependent discretization (transport plans, similarity masks, dropout)
/// must already be frozen inside it.
///
/// Returns max over parameters of |analytic - central| / max(1, |analytic|).
pub fn finite_difference_check<F>(params: &ParamSet, h: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape, &ParamSet) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(CoreError::invalid(format!("fd step {h} outside [1e-7, 1e-3]")));
    }

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        f(&tape, p)?.item()
    };

    // Two untracked evaluations must agree bit-for-bit.
    let v1 = eval(params)?;
    let v2 = eval(params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(CoreError::numeric(format!(
            "finite_difference_check: function is not deterministic ({v1} vs {v2})"
        )));
    }

    let tape = Tape::new();
    let leafed = params.leafed(&tape);
    let loss = f(&tape, &leafed)?;
    let grads = tape.backward(&loss)?;

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let (_, leaf) = leafed.at(i);
        let analytic = grads.wrt(leaf)?;
        for j in 0..analytic.len() {
            let original = work.at(i).1.data()[j];
            work.at_mut(i).data_mut()[j] = original + h;
            let plus = eval(&work)?;
            work.at_mut(i).data_mut()[j] = original - h;
            let minus = eval(&work)?;
            work.at_mut(i).data_mut()[j] = original;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_machine_exact() {
        let mut params = ParamSet::new();
        params
            .add("x", Tensor::new(2, 2, vec![0.7, -1.1, 0.4, 2.3]).unwrap())
            .unwrap();
        // f = sum(x ⊙ x) + 3·mean(x): gradient 2x + 3/4
        let err = finite_difference_check(&params, 1e-5, |tape, p| {
            let x = p.get("x")?;
            let sq = tape.elemwise_mul(x, x)?;
            let a = tape.sum_all(&sq)?;
            let b = tape.scale(&tape.mean_all(x)?, 3.0)?;
            tape.add(&a, &b)
        })
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn composite_nonlinear_chain_under_1e4() {
        let mut params = ParamSet::new();
        params
            .add("w", Tensor::new(3, 2, vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5]).unwrap())
            .unwrap();
        params.add("b", Tensor::new(1, 2, vec![0.05, -0.02]).unwrap()).unwrap();
        let x = Tensor::new(2, 3, vec![1.0, -0.5, 0.25, 0.75, 0.1, -0.9]).unwrap();
        let err = finite_difference_check(&params, 1e-5, move |tape, p| {
            let h = tape.matmul(&x, p.get("w")?)?;
            let h = tape.add_row(&h, p.get("b")?)?;
            let h = tape.selu(&h)?;
            let s = tape.row_softmax(&h)?;
            let t = tape.tanh(&tape.sigmoid(&h)?)?;
            let mixed = tape.elemwise_mul(&s, &t)?;
            tape.mean_all(&mixed)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(1.0)).unwrap();
        let r = finite_difference_check(&params, 1e-2, |tape, p| tape.sum_all(p.get("x")?));
        assert!(r.is_err());
    }
}
