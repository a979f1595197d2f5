use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// First moment and infinity-norm accumulator per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<DenseMatrix>,
    u: Vec<DenseMatrix>,
}

impl AdamaxState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes
                .iter()
                .map(|&(r, c)| DenseMatrix::zeros(r, c))
                .collect(),
            u: shapes
                .iter()
                .map(|&(r, c)| DenseMatrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn first_moment(&self, k: usize) -> &DenseMatrix {
        &self.m[k]
    }

    pub fn infinity_norm(&self, k: usize) -> &DenseMatrix {
        &self.u[k]
    }
}

/// One Adamax update with decoupled weight decay on entries where
/// `decay_mask` is set. A non-finite gradient aborts before anything moves.
pub fn adamax_step(
    params: &mut [&mut DenseMatrix],
    grads: &[DenseMatrix],
    names: &[String],
    state: &mut AdamaxState,
    lr: f64,
    weight_decay: f64,
    decay_mask: &[bool],
) -> Result<()> {
    let k = params.len();
    if grads.len() != k || names.len() != k || decay_mask.len() != k || state.m.len() != k {
        return Err(Error::Shape(format!(
            "{k} parameters, {} gradients, {} names, {} masks, {} optimizer slots",
            grads.len(),
            names.len(),
            decay_mask.len(),
            state.m.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{name}: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NanGradient(name.clone()));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let step_size = lr / (1.0 - b1.powi(state.step as i32));
    for i in 0..k {
        let decay = if decay_mask[i] {
            1.0 - lr * weight_decay
        } else {
            1.0
        };
        let m = state.m[i].as_mut_slice();
        let u = state.u[i].as_mut_slice();
        let theta = params[i].as_mut_slice();
        for (((t, &g), mi), ui) in theta.iter_mut().zip(grads[i].as_slice()).zip(m).zip(u) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *ui = (b2 * *ui).max(g.abs());
            *t = *t * decay - step_size * *mi / (*ui + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn unit_gradient_first_step() {
        let mut p = DenseMatrix::scalar(0.0);
        let mut st = AdamaxState::new(&[(1, 1)]);
        adamax_step(
            &mut [&mut p],
            &[DenseMatrix::scalar(1.0)],
            &names(1),
            &mut st,
            0.1,
            0.0,
            &[true],
        )
        .unwrap();
        assert!((p.item().unwrap() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_only_decays_masked() {
        let mut a = DenseMatrix::scalar(2.0);
        let mut b = DenseMatrix::scalar(2.0);
        let mut st = AdamaxState::new(&[(1, 1), (1, 1)]);
        let g = [DenseMatrix::scalar(0.0), DenseMatrix::scalar(0.0)];
        adamax_step(
            &mut [&mut a, &mut b],
            &g,
            &names(2),
            &mut st,
            0.1,
            0.1,
            &[true, false],
        )
        .unwrap();
        assert!((a.item().unwrap() - 2.0 * 0.99).abs() < 1e-15);
        assert_eq!(b.item().unwrap(), 2.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut a = DenseMatrix::scalar(1.0);
        let mut st = AdamaxState::new(&[(1, 1)]);
        let err = adamax_step(
            &mut [&mut a],
            &[DenseMatrix::scalar(f64::NAN)],
            &names(1),
            &mut st,
            0.1,
            0.0,
            &[true],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NanGradient(ref n) if n == "p0"));
        assert_eq!(a.item().unwrap(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn infinity_norm_is_monotone_under_constant_magnitude() {
        let mut a = DenseMatrix::scalar(0.0);
        let mut st = AdamaxState::new(&[(1, 1)]);
        let mut last = 0.0;
        for t in 0..20 {
            let g = if t % 2 == 0 { 1.5 } else { -1.5 };
            adamax_step(
                &mut [&mut a],
                &[DenseMatrix::scalar(g)],
                &names(1),
                &mut st,
                0.01,
                0.0,
                &[true],
            )
            .unwrap();
            let u = st.infinity_norm(0).item().unwrap();
            assert!(u >= last && u >= 0.0);
            last = u;
        }
    }
}
