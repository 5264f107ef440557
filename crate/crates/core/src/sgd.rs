//! Minibatch gradient descent with classical momentum and L2 weight decay.
//!
//! Both trainable models in this crate (the patch encoder and the graph
//! network) expose their parameters as flat lists of matrices; this module
//! owns the update rule so the two trainers cannot drift apart.
//!
//! Per parameter matrix `w` with gradient `g`:
//!
//! ```text
//! v <- momentum * v + (g + weight_decay * w)
//! w <- w - learning_rate * v
//! ```

use nalgebra::DMatrix;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig<T: Scalar> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
}

/// Momentum buffers, one per parameter matrix, in parameter-list order.
#[derive(Debug, Clone)]
pub struct SgdState<T: Scalar> {
    velocity: Vec<DMatrix<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn zeros_like(params: &[&DMatrix<T>]) -> Self {
        SgdState {
            velocity: params
                .iter()
                .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
                .collect(),
        }
    }

    /// Applies one update to every parameter in place. Panics if the list
    /// shapes do not match the state; that is a programming error, not a
    /// data error.
    pub fn step(
        &mut self,
        config: &SgdConfig<T>,
        params: &mut [&mut DMatrix<T>],
        grads: &[&DMatrix<T>],
    ) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(param.shape(), grad.shape());
            assert_eq!(param.shape(), vel.shape());
            for i in 0..vel.len() {
                let g = grad[i] + param[i] * config.weight_decay;
                vel[i] = vel[i] * config.momentum + g;
                param[i] -= vel[i] * config.learning_rate;
            }
        }
    }
}
