use super::{RewardError, RewardModel};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::synthdata::Condition;

fn unit_rows(z: &Tensor) -> Vec<Vec<f64>> {
    (0..z.rows())
        .map(|i| {
            let r = z.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect()
}

/// Off-diagonal pairs whose condition embeddings have cosine ≥ `threshold`.
/// `true` means the pair is dropped from the negatives.
pub fn negative_mask(z_cond: &Tensor, threshold: f64) -> Vec<bool> {
    let u = unit_rows(z_cond);
    let n = u.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let sim: f64 = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum();
                mask[i * n + j] = sim >= threshold;
            }
        }
    }
    mask
}

/// Symmetric InfoNCE over cosine / τ logits.
pub(crate) fn contrastive_on_tape(tape: &Tape, z_x: Var, z_c: Var, tau: f64, mask: &[bool]) -> Var {
    let a = tape.normalize_rows(z_x);
    let b = tape.normalize_rows(z_c);
    let logits = tape.scale(tape.matmul(a, tape.transpose(b)), 1.0 / tau);
    let forward = tape.cross_entropy_diag(logits, mask);
    let backward = tape.cross_entropy_diag(tape.transpose(logits), mask);
    tape.scale(tape.add(forward, backward), 0.5)
}

/// Filtered symmetric InfoNCE for matched rows of `z_motion` and `z_cond`.
pub fn contrastive_loss(
    z_motion: &Tensor,
    z_cond: &Tensor,
    tau: f64,
    threshold: f64,
) -> Result<f64, RewardError> {
    if z_motion.shape().len() != 2 || z_motion.rows() == 0 {
        return Err(RewardError::EmptyBatch);
    }
    if z_motion.shape() != z_cond.shape() {
        return Err(NumericsError::ShapeMismatch {
            expected: z_motion.shape().to_vec(),
            got: z_cond.shape().to_vec(),
        }
        .into());
    }
    let mask = negative_mask(z_cond, threshold);
    let tape = Tape::new();
    let zx = tape.constant(z_motion.clone());
    let zc = tape.constant(z_cond.clone());
    Ok(tape
        .value(contrastive_on_tape(&tape, zx, zc, tau, &mask))
        .item())
}

/// Batch mean of smooth-L1(dec(z_x), x0) + smooth-L1(dec(z_c), x0) + L1(z_x - z_c),
/// each term summed over its elements.
pub(crate) fn representation_on_tape(
    tape: &Tape,
    model: &RewardModel,
    p: &[Var],
    z_x: Var,
    z_c: Var,
    x0: Var,
    batch: usize,
) -> Var {
    let rx = model.decode(tape, p, z_x);
    let rc = model.decode(tape, p, z_c);
    let terms = [
        tape.sum(tape.smooth_l1(tape.sub(rx, x0))),
        tape.sum(tape.smooth_l1(tape.sub(rc, x0))),
        tape.sum(tape.abs(tape.sub(z_x, z_c))),
    ];
    let total = tape.add(tape.add(terms[0], terms[1]), terms[2]);
    tape.scale(total, 1.0 / batch as f64)
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// The representation loss evaluated on precomputed reconstructions and latents.
pub fn representation_loss_from_parts(
    recon_x: &Tensor,
    recon_c: &Tensor,
    z_x: &Tensor,
    z_c: &Tensor,
    x0: &Tensor,
) -> Result<f64, RewardError> {
    let mut total = 0.0;
    for r in [recon_x, recon_c] {
        if r.len() != x0.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: x0.shape().to_vec(),
                got: r.shape().to_vec(),
            }
            .into());
        }
        total += r
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| smooth_l1(a - b))
            .sum::<f64>();
    }
    z_x.expect_same_shape(z_c)?;
    total += z_x
        .data()
        .iter()
        .zip(z_c.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    Ok(total)
}

/// Representation loss of one noised motion `x_t` at step `t` against its
/// clean source `x0` and condition `c`.
pub fn representation_loss(
    model: &RewardModel,
    x_t: &Tensor,
    t: usize,
    x0: &Tensor,
    c: &Condition,
) -> Result<f64, RewardError> {
    model.check_t(t)?;
    let xt = model.flat_motion(x_t)?;
    let x0 = model.flat_motion(x0)?;
    let tokens = c.tokens();
    RewardModel::check_tokens(&tokens)?;
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let xv = tape.constant(xt);
    let zx = model.motion_latent(&tape, &p, xv, &[t]);
    let zc = model.condition_latent(&tape, &p, &[tokens]);
    let x0v = tape.constant(x0);
    Ok(tape
        .value(representation_on_tape(&tape, model, &p, zx, zc, x0v, 1))
        .item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn brute_infonce(zm: &Tensor, zc: &Tensor, tau: f64, threshold: f64) -> f64 {
        let n = zm.rows();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let keep = |i: usize, j: usize| i == j || cos(zc.row(i), zc.row(j)) < threshold;
        let mut total = 0.0;
        for i in 0..n {
            let pos = (cos(zm.row(i), zc.row(i)) / tau).exp();
            let z: f64 = (0..n)
                .filter(|&j| keep(i, j))
                .map(|j| (cos(zm.row(i), zc.row(j)) / tau).exp())
                .sum();
            total += -(pos / z).ln();
            let pos = (cos(zc.row(i), zm.row(i)) / tau).exp();
            let z: f64 = (0..n)
                .filter(|&j| keep(i, j))
                .map(|j| (cos(zc.row(i), zm.row(j)) / tau).exp())
                .sum();
            total += -(pos / z).ln();
        }
        total / (2 * n) as f64
    }

    #[test]
    fn batch_of_one_is_zero() {
        let z = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::matrix(1, 3, vec![-1.0, 0.5, 0.0]).unwrap();
        assert_eq!(contrastive_loss(&z, &w, 0.1, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let got = contrastive_loss(&z, &c, 0.1, 2.0).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = RngStream::new(3, 0);
        for threshold in [2.0, 0.9, 0.3, -0.5] {
            let zm = rng.gaussian(&[8, 5]);
            let zc = rng.gaussian(&[8, 5]);
            let got = contrastive_loss(&zm, &zc, 0.1, threshold).unwrap();
            let want = brute_infonce(&zm, &zc, 0.1, threshold);
            assert!((got - want).abs() < 1e-10, "{threshold}: {got} vs {want}");
        }
    }

    #[test]
    fn filtering_extremes() {
        let mut rng = RngStream::new(4, 0);
        let zm = rng.gaussian(&[6, 4]);
        let zc = rng.gaussian(&[6, 4]);
        let unfiltered = brute_infonce(&zm, &zc, 0.1, f64::INFINITY);
        assert!((contrastive_loss(&zm, &zc, 0.1, 1.0 + 1e-9).unwrap() - unfiltered).abs() < 1e-12);
        assert_eq!(contrastive_loss(&zm, &zc, 0.1, -1.0).unwrap(), 0.0);
    }

    #[test]
    fn representation_hand_values() {
        let x0 = Tensor::full(&[8], 1.0);
        let z = Tensor::vector(vec![0.3, -0.2]);
        assert_eq!(
            representation_loss_from_parts(&x0, &x0, &z, &z, &x0).unwrap(),
            0.0
        );
        let zero = Tensor::zeros(&[8]);
        assert_eq!(
            representation_loss_from_parts(&zero, &x0, &z, &z, &x0).unwrap(),
            4.0
        );
        assert_eq!(
            representation_loss_from_parts(&zero, &zero, &z, &z, &x0).unwrap(),
            8.0
        );
        let z2 = Tensor::vector(vec![0.3, 0.8]);
        assert!(
            (representation_loss_from_parts(&x0, &x0, &z, &z2, &x0).unwrap() - 1.0).abs() < 1e-15
        );
        assert!(representation_loss_from_parts(&Tensor::zeros(&[7]), &x0, &z, &z, &x0).is_err());
    }
}
