//! Dense `f64` tensors, a reverse-mode tape, Adam, and a finite-difference
//! gradient checker.

mod optim;
mod tape;
mod tensor;

use rand::seq::index::sample;
use rand::Rng;

pub use optim::Adam;
pub use tape::{gelu_scalar, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{checksum, numel, Tensor, TensorId};

use crate::error::Result;

/// Anything that owns tensors an optimizer or gradient checker can reach.
/// Order must be stable across calls.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn trainable_count(&self) -> usize {
        self.params().iter().filter(|t| t.requires_grad()).map(|t| t.len()).sum()
    }

    fn total_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn checksum(&self) -> u64 {
        checksum(self.params())
    }
}

/// Eager matrix product of two rank-≤2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.input(a), tape.input(b));
    let c = tape.matmul(av, bv)?;
    Ok(tape.to_tensor(c))
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = tape.softmax(xv)?;
    let mut out = tape.to_tensor(y);
    if x.shape().len() <= 1 {
        out = Tensor::new(x.shape().to_vec(), out.data().to_vec())?;
    }
    Ok(out)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.input(x), tape.input(gain), tape.input(bias));
    let y = tape.layer_norm(xv, gv, bv)?;
    Ok(tape.to_tensor(y))
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares an analytic gradient against central differences with step `h`
/// and returns the worst relative error over the coordinates of `theta`.
///
/// `f` returns the function value and its analytic gradient with respect to
/// `theta`; only the value is used at perturbed points.
pub fn finite_difference_check<F>(theta: &Tensor, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(theta)?;
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe)?.0;
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe)?.0;
        probe.data_mut()[k] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    Ok(worst)
}

/// Gradient check over every trainable tensor of a model. Tensors larger
/// than `max_coords` are checked on a random coordinate sample.
pub fn model_gradient_check<M, F, R>(
    model: &mut M,
    h: f64,
    max_coords: usize,
    rng: &mut R,
    loss: F,
) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&M) -> Result<(f64, Gradients)>,
    R: Rng,
{
    let (_, grads) = loss(model)?;
    let analytic: Vec<Option<Vec<f64>>> = model
        .params()
        .iter()
        .map(|t| {
            t.requires_grad()
                .then(|| grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let coords: Vec<usize> = if grad.len() > max_coords {
            let mut c = sample(rng, grad.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..grad.len()).collect()
        };
        for k in coords {
            let orig = model.params_mut()[i].data()[k];
            model.params_mut()[i].data_mut()[k] = orig + h;
            let fp = loss(model)?.0;
            model.params_mut()[i].data_mut()[k] = orig - h;
            let fm = loss(model)?.0;
            model.params_mut()[i].data_mut()[k] = orig;
            worst = worst.max(relative_error(grad[k], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
        let x = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let y = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&x, &y).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Tensor::uniform(&[3, 3], 2.0, &mut rng);
            let b = Tensor::uniform(&[3, 3], 2.0, &mut rng);
            let got = matmul(&a, &b).unwrap();
            for (x, y) in got.data().iter().zip(triple_loop(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.7, 700.0] {
            let s = softmax(&Tensor::vector(vec![c; 3])).unwrap();
            for v in s.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert_eq!(s.shape(), &[2]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let r = softmax(&Tensor::vector(vec![0.0, bad]));
            assert!(matches!(r, Err(Error::NumericDomain(_))));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[4], 3.5), &ones, &zeros).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let g2 = Tensor::full(&[2], 1.0);
        let b2 = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::vector(vec![1.0, -1.0]), &g2, &b2).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);

        let bias = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let y = layer_norm(&Tensor::vector(vec![4.0, -2.0, 9.0]), &Tensor::zeros(&[3]), &bias)
            .unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn layer_norm_needs_two_features() {
        let one = Tensor::vector(vec![1.0]);
        assert!(matches!(layer_norm(&one, &one, &one), Err(Error::Shape(_))));
    }

    #[test]
    fn quadratic_form_gradcheck() {
        // f(θ) = θᵀ M θ with gradient (M + Mᵀ) θ
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let theta = Tensor::uniform(&[4], 1.0, &mut rng);
        let err = finite_difference_check(&theta, 1e-5, |th| {
            let x = th.data();
            let mut val = 0.0;
            let mut grad = vec![0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    val += x[i] * m.get2(i, j) * x[j];
                    grad[i] += (m.get2(i, j) + m.get2(j, i)) * x[j];
                }
            }
            Ok((val, grad))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_difference_check(&theta, 1e-5, |_| Ok((3.0, vec![0.0, 0.0]))).unwrap();
        assert_eq!(err, 0.0);
    }

    struct TwoLayer {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        g: Tensor,
        beta: Tensor,
    }

    impl Parameterized for TwoLayer {
        fn params(&self) -> Vec<&Tensor> {
            vec![&self.w1, &self.b1, &self.w2, &self.g, &self.beta]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.g, &mut self.beta]
        }
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = TwoLayer {
                w1: Tensor::glorot(&[6, 4], 4, 6, &mut rng).trainable(),
                b1: Tensor::uniform(&[6], 0.1, &mut rng).trainable(),
                w2: Tensor::glorot(&[3, 6], 6, 3, &mut rng).trainable(),
                g: Tensor::uniform(&[3], 1.0, &mut rng).trainable(),
                beta: Tensor::uniform(&[3], 0.5, &mut rng).trainable(),
            };
            let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
            let target = Tensor::uniform(&[3], 1.0, &mut rng);
            let err = model_gradient_check(&mut net, 1e-5, 1000, &mut rng, |n| {
                let mut tape = Tape::new();
                let xv = tape.input(&x);
                let (w1, b1, w2) = (tape.input(&n.w1), tape.input(&n.b1), tape.input(&n.w2));
                let h = tape.linear(xv, w1, Some(b1))?;
                let h = tape.gelu(h);
                let y = tape.linear(h, w2, None)?;
                let (g, beta) = (tape.input(&n.g), tape.input(&n.beta));
                let y = tape.layer_norm(y, g, beta)?;
                let p = tape.softmax(y)?;
                let pooled = tape.mean_rows(p)?;
                let tv = tape.input(&target);
                let c = tape.cosine(pooled, tv)?;
                let ce = tape.cross_entropy(pooled, 1)?;
                let loss = tape.add(c, ce)?;
                Ok((tape.scalar(loss), tape.backward(loss)?))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
