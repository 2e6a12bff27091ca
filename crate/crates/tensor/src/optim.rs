use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Applies one update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.velocity.resize(store.len(), None);
        for ((param, grad), vel) in store.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = grad else { continue };
            let v = vel.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((p, v), &g) in param.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}
