//! Linear dictionary generator `x ~ A z`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary<T: Scalar> {
    /// `[data_dim, latent_dim]`
    pub a: Tensor<T>,
    /// Frobenius penalty weight.
    pub kappa: T,
}

impl<T: Scalar> Dictionary<T> {
    pub fn new(a: Tensor<T>, kappa: T) -> Result<Self> {
        if a.shape().len() != 2 {
            return Err(Error::shape("Dictionary", format!("expected a matrix, got {:?}", a.shape())));
        }
        if !(kappa >= T::zero()) {
            return Err(Error::invalid("kappa must be nonnegative"));
        }
        Ok(Dictionary { a, kappa })
    }

    pub fn data_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn frobenius_sq(&self) -> T {
        self.a.sum_sq()
    }

    /// `||x_b - A z_b||^2` for every column `b`.
    pub fn residual_sq(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<Vec<T>> {
        let r = x.zip_map(&self.a.matmul(z)?, |a, b| a - b)?;
        Ok(r.column_sq_norms())
    }
}

/// Gaussian columns scaled to unit norm, seeded.
pub fn init_dictionary<T: Scalar>(data_dim: usize, latent_dim: usize, kappa: T, seed: u64) -> Result<Dictionary<T>> {
    if data_dim == 0 || latent_dim == 0 {
        return Err(Error::invalid("dictionary dims must be at least 1"));
    }
    let mut rng = stream(seed, Stream::DictionaryInit);
    let raw: Vec<f64> = (0..data_dim * latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut a = Tensor::<f64>::new(vec![data_dim, latent_dim], raw)?;
    normalize_columns(&mut a);
    Dictionary::new(a.cast(), kappa)
}

pub(crate) fn normalize_columns(a: &mut Tensor<f64>) {
    let norms: Vec<f64> = a.column_sq_norms().into_iter().map(f64::sqrt).collect();
    let cols = a.cols();
    for (i, v) in a.data_mut().iter_mut().enumerate() {
        let n = norms[i % cols];
        if n > 0.0 {
            *v /= n;
        }
    }
}

/// `-||x_b - A z_b||^2` per column: `[batch]`.
pub fn log_likelihood_per_datum<'g, T: Scalar>(a: Var<'g, T>, x: Var<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    x.sub(a.matmul(z)?)?.square()?.sum_rows()?.neg()
}

/// Batch mean of `-||x - A z||^2`.
pub fn log_likelihood<'g, T: Scalar>(a: Var<'g, T>, x: Var<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    log_likelihood_per_datum(a, x, z)?.mean()
}

/// `kappa ||A||_F^2`.
pub fn frobenius_penalty<'g, T: Scalar>(a: Var<'g, T>, kappa: T) -> Result<Var<'g, T>> {
    if !(kappa >= T::zero()) {
        return Err(Error::invalid("kappa must be nonnegative"));
    }
    a.square()?.sum()?.scale(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{grad_check_many, Graph};

    #[test]
    fn likelihood_examples() {
        let g = Graph::<f64>::new();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let a = g.constant(Tensor::eye(3));
        let ll = log_likelihood(a, g.constant(x.clone()), g.constant(Tensor::zeros(&[3, 2]))).unwrap();
        assert!((ll.item() + x.sum_sq() / 2.0).abs() < 1e-14);
        let ll = log_likelihood(a, g.constant(x.clone()), g.constant(x)).unwrap();
        assert_eq!(ll.item(), 0.0);
    }

    #[test]
    fn likelihood_gradient_wrt_dictionary() {
        let x = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.7).sin());
        let z = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).cos());
        let a = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.11).tan());
        let rep = grad_check_many(|g, v| log_likelihood(v[0], g.constant(x.clone()), g.constant(z.clone())), &[a], 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    #[test]
    fn frobenius_examples() {
        let g = Graph::<f64>::new();
        assert_eq!(frobenius_penalty(g.constant(Tensor::zeros(&[3, 3])), 1.0).unwrap().item(), 0.0);
        assert_eq!(frobenius_penalty(g.constant(Tensor::eye(3)), 1.0).unwrap().item(), 3.0);
        assert!(frobenius_penalty(g.constant(Tensor::eye(3)), -1.0).is_err());
    }

    #[test]
    fn init_unit_columns_and_seeded() {
        let d = init_dictionary::<f64>(256, 256, 1e-4, 0).unwrap();
        for n in d.a.column_sq_norms() {
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(d, init_dictionary::<f64>(256, 256, 1e-4, 0).unwrap());
        assert_ne!(d, init_dictionary::<f64>(256, 256, 1e-4, 1).unwrap());
        let (c0, c1) = (d.a.column(0), d.a.column(1));
        let cos: f64 = c0.iter().zip(&c1).map(|(a, b)| a * b).sum();
        assert!(cos.abs() < 0.5);
    }
}
