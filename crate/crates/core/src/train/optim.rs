use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Heavy-ball momentum step: `v <- momentum * v + grad; p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("params, grads and velocity must have equal length"));
    }
    let (lr, momentum) = (lr as f32, momentum as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch in sgd step: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Cosine decay from `lr_max` at epoch 0 towards 0.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64) -> f64 {
    if total_epochs == 0 {
        return lr_max;
    }
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_and_carryover() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let mut v = vec![Tensor::zeros(&[2])];
        sgd_step(&mut [&mut p], &[&g], 1.0, 0.0, &mut v).unwrap();
        assert_eq!(p.data(), &[0.5, 3.0]);

        let mut v = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let zero = Tensor::zeros(&[2]);
        sgd_step(&mut [&mut p], &[&zero], 0.1, 0.9, &mut v).unwrap();
        assert!((p.data()[0] - (0.5 - 0.09)).abs() < 1e-7);
        assert!((p.data()[1] - (3.0 - 0.09)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_recurrence() {
        // f(p) = p^2 / 2, grad = p
        let (lr, mu) = (0.1f32, 0.9f32);
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut v = vec![Tensor::zeros(&[1])];
        let (mut pe, mut ve) = (1.0f32, 0.0f32);
        for _ in 0..3 {
            let g = p.clone();
            sgd_step(&mut [&mut p], &[&g], lr as f64, mu as f64, &mut v).unwrap();
            ve = mu * ve + pe;
            pe -= lr * ve;
        }
        assert_eq!(p.data()[0], pe);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(cosine_lr(0, 200, 0.1), 0.1);
        assert!((cosine_lr(100, 200, 0.1) - 0.05).abs() < 1e-15);
        let last = cosine_lr(199, 200, 0.1);
        assert!((last - 6.168e-6).abs() < 1e-8, "{last}");
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut v = vec![Tensor::zeros(&[2])];
        assert!(sgd_step(&mut [&mut p], &[&g], 0.1, 0.9, &mut v).is_err());
    }
}
