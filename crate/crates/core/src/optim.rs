use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with classical momentum: `v ← μ·v + g`, `w ← w − lr·v`.
///
/// One velocity buffer per parameter slot, created lazily on the first step.
/// Slots are identified by position, so callers must pass parameters in the
/// same order every step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    /// Applies one update. Each entry is `(parameter, gradient, learning rate)`.
    pub fn step<'a>(&mut self, slots: impl IntoIterator<Item = (&'a mut Tensor<T>, &'a Tensor<T>, T)>) -> Result<()> {
        for (i, (param, grad, lr)) in slots.into_iter().enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                });
            }
            if self.velocity.len() == i {
                self.velocity.push(Tensor::zeros(param.shape()));
            }
            let v = &mut self.velocity[i];
            if v.shape() != param.shape() {
                return Err(Error::ShapeMismatch { op: "sgd", detail: format!("slot {i} changed shape") });
            }
            let mu = self.momentum;
            for ((w, vel), &g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vel = mu * *vel + g;
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}

/// Single momentum step over parallel slices; convenience over [`Sgd::step`].
pub fn sgd_with_momentum_step<T: Scalar>(
    opt: &mut Sgd<T>,
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!("{} params but {} grads", params.len(), grads.len())));
    }
    opt.step(params.iter_mut().zip(grads).map(|(p, g)| (p, g, lr)))
}
