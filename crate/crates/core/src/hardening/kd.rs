use crate::error::{Error, Result};
use crate::tensor::{log_softmax_row, Tensor};

/// Value and student-logit gradient of the distillation objective.
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub loss: f64,
    /// Batch-mean `KL(P_student || P_teacher)` at temperature `T`.
    pub kl: f64,
    /// Batch-mean cross-entropy of the student at temperature 1.
    pub ce: f64,
    /// `gamma * sum(lambda^2)`.
    pub reg: f64,
    /// d loss / d student logits.
    pub grad: Tensor,
}

/// `KL(P(s,T) || P(t,T)) + CE(softmax(s), y) + gamma * sum(lambda^2)`,
/// with the first two terms averaged over the batch.
///
/// The KL term carries no `T^2` factor.
pub fn kd_loss(
    student: &Tensor,
    teacher: &Tensor,
    labels: &[usize],
    lambdas: &[f64],
    temperature: f64,
    gamma: f64,
) -> Result<KdLoss> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            student.batch(),
            labels.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidValue(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidValue(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    let classes = student.shape()[1];
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(student.shape().to_vec());
    let (mut kl, mut ce) = (0.0, 0.0);
    let mut ls = vec![0.0; classes];
    let mut lt = vec![0.0; classes];
    let mut l1 = vec![0.0; classes];
    for (s, ((srow, trow), &y)) in student
        .data()
        .chunks(classes)
        .zip(teacher.data().chunks(classes))
        .zip(labels)
        .enumerate()
    {
        if y >= classes {
            return Err(Error::InvalidValue(format!(
                "label {y} >= {classes} classes"
            )));
        }
        log_softmax_row(srow, temperature, &mut ls);
        log_softmax_row(trow, temperature, &mut lt);
        log_softmax_row(srow, 1.0, &mut l1);
        // KL = sum_i p_i (log p_i - log q_i); dKL/ds_j = p_j (u_j - KL) / T
        let row_kl: f64 = ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum();
        kl += row_kl;
        ce -= l1[y];
        let g = &mut grad.data_mut()[s * classes..(s + 1) * classes];
        for j in 0..classes {
            let p = ls[j].exp();
            g[j] = (p * ((ls[j] - lt[j]) - row_kl) / temperature + l1[j].exp()) / n;
        }
        g[y] -= 1.0 / n;
    }
    let reg = gamma * lambdas.iter().map(|l| l * l).sum::<f64>();
    let (kl, ce) = (kl / n, ce / n);
    Ok(KdLoss {
        loss: kl + ce + reg,
        kl,
        ce,
        reg,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn t(rows: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, data.len() / rows], data.to_vec()).unwrap()
    }

    #[test]
    fn identical_logits_have_zero_kl() {
        let z = t(2, &[9.0, -3.0, 0.5, -1.0, 7.0, 2.0]);
        let out = kd_loss(&z, &z, &[0, 1], &[], 4.0, 0.0).unwrap();
        assert_eq!(out.kl, 0.0);
        assert_eq!(out.reg, 0.0);
        assert!(out.ce > 0.0 && out.ce < 0.01);
    }

    #[test]
    fn regulariser_arithmetic() {
        // saturated correct logits: KL and CE both vanish in f64
        let z = t(1, &[1e4, 0.0]);
        let out = kd_loss(&z, &z, &[0], &[2.0, 3.0], 4.0, 1.0).unwrap();
        assert_eq!(out.kl, 0.0);
        assert_eq!(out.ce, 0.0);
        assert_eq!(out.loss, 13.0);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let a = t(1, &[0.0, 1.0]);
        let b = t(1, &[0.0, 1.0, 2.0]);
        assert!(matches!(
            kd_loss(&a, &b, &[0], &[], 1.0, 0.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            kd_loss(&a, &a, &[0, 1], &[], 1.0, 0.0),
            Err(Error::Shape(_))
        ));
        assert!(kd_loss(&a, &a, &[0], &[], 0.0, 0.0).is_err());
    }

    #[test]
    fn loss_dominates_cross_entropy() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..50 {
            let s: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let q: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let out = kd_loss(&t(3, &s), &t(3, &q), &[0, 2, 3], &[1.0], 3.0, 0.1).unwrap();
            assert!(out.kl >= 0.0);
            assert!(out.loss >= out.ce);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..100 {
            let s: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let temp = rng.gen_range(0.5..6.0);
            let (st, qt) = (t(2, &s), t(2, &q));
            let labels = [rng.gen_range(0..5), rng.gen_range(0..5)];
            let out = kd_loss(&st, &qt, &labels, &[0.7], temp, 0.3).unwrap();
            for i in 0..10 {
                let mut p = st.clone();
                p.data_mut()[i] += h;
                let mut m = st.clone();
                m.data_mut()[i] -= h;
                let fd = (kd_loss(&p, &qt, &labels, &[0.7], temp, 0.3).unwrap().loss
                    - kd_loss(&m, &qt, &labels, &[0.7], temp, 0.3).unwrap().loss)
                    / (2.0 * h);
                let g = out.grad.data()[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
                assert!(rel <= 1e-5, "analytic {g} vs fd {fd}");
            }
        }
    }
}
