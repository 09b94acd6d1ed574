use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const HEAD_INIT_STD: f64 = 0.02;

/// Linear classifier with one weight row and bias per class seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl ClassifierHead {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("head needs at least one class and one feature".into()));
        }
        let weight = store.add("head.w", ParamGroup::Head, Tensor::trunc_normal(vec![classes, dim], HEAD_INIT_STD, rng));
        let bias = store.add("head.b", ParamGroup::Head, Tensor::zeros(vec![classes]));
        Ok(Self { weight, bias, dim })
    }

    pub fn classes<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }

    /// Append `n` rows; existing rows and biases are kept bit-exactly.
    pub fn expand<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, n: usize, rng: &mut R) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        let c = self.classes(store);
        let fresh = Tensor::<T>::trunc_normal(vec![n, self.dim], HEAD_INIT_STD, rng);
        let mut w = store.get(self.weight).data().to_vec();
        w.extend_from_slice(fresh.data());
        let mut b = store.get(self.bias).data().to_vec();
        b.resize(c + n, T::zero());
        let trainable = store.get(self.weight).requires_grad();
        store.replace(self.weight, Tensor::new(vec![c + n, self.dim], w)?.with_grad(trainable));
        store.replace(self.bias, Tensor::new(vec![c + n], b)?.with_grad(trainable));
        Ok(())
    }

    /// `feature[B, D] -> logits[B, C]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, feature: Var) -> Result<Var> {
        let s = tape.shape(feature).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape("head", &s, &[self.dim]));
        }
        let w = tape.param(self.weight);
        let c = tape.shape(w)[0];
        let x = tape.reshape(feature, vec![1, s[0], self.dim])?;
        let w3 = tape.reshape(w, vec![1, c, self.dim])?;
        let z = tape.bmm(x, w3, true)?;
        let z = tape.reshape(z, vec![s[0], c])?;
        tape.add(z, tape.param(self.bias))
    }
}
