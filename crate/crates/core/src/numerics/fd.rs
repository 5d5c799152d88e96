use super::{NumericsError, Tensor};

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_grad<F, E>(f: F, x: &Tensor, h: f64) -> Result<Tensor, E>
where
    F: Fn(&Tensor) -> Result<f64, E>,
    E: From<NumericsError>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(NumericsError::InvalidStep(h).into());
    }
    let base = x.data().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = base[i] - h;
        let minus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite { coordinate: i }.into());
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).expect("relative_error: shapes differ").norm();
    let scale = a.norm().max(b.norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let g = finite_diff_grad::<_, NumericsError>(
            |t| Ok(t.item() * t.item()),
            &Tensor::scalar(1.0),
            1e-5,
        )
        .unwrap();
        assert!((g.item() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn linear_function_gives_ones() {
        let x = Tensor::vector(vec![0.3, -2.0, 7.5, 1e3]);
        let g = finite_diff_grad::<_, NumericsError>(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let x = Tensor::vector(vec![1.0, 0.0, 2.0]);
        let err = finite_diff_grad::<_, NumericsError>(|t| Ok(1.0 / t.data()[1]), &x, 1e-5);
        assert!(matches!(
            err,
            Err(NumericsError::NonFinite { coordinate: 0 })
        ));
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = finite_diff_grad::<_, NumericsError>(|t| Ok(t.sum()), &Tensor::scalar(0.0), 0.0);
        assert!(matches!(r, Err(NumericsError::InvalidStep(_))));
    }
}
