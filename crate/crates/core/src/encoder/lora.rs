use crate::error::Result;
use crate::numerics::{Graph, Parameter, Scalar, Var};

/// Trainable low-rank update `ΔW = scale·A·B` for a frozen `d×d` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    /// `d×r`
    pub a: Parameter<T>,
    /// `r×d`, zero at initialization
    pub b: Parameter<T>,
    /// `s / r`
    pub scale: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.b.tensor.shape()[0]
    }
}

/// `x·W + scale·(x·A)·B`.
pub fn lora_apply<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let down = g.matmul(x, a)?;
    let up = g.matmul(down, b)?;
    let delta = g.scale(up, T::lit(scale));
    g.add(base, delta)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let (xv, wv, av, bv) = (g.borrow(x), g.borrow(w), g.borrow(a), g.borrow(b));
        let out = lora_apply(&mut g, xv, wv, av, bv, scale).unwrap();
        let base = g.matmul(xv, wv).unwrap();
        (g.value(out).to_vec(), g.value(base).to_vec())
    }

    #[test]
    fn zero_b_reproduces_frozen_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, w, a) = (random(&mut rng, &[5, 8]), random(&mut rng, &[8, 8]), random(&mut rng, &[8, 4]));
        let b = Tensor::zeros(vec![4, 8]);
        let (out, base) = run(&x, &w, &a, &b, 1.0);
        assert_eq!(out, base);
    }

    #[test]
    fn delta_scales_linearly_with_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, w, a, b) = (
            random(&mut rng, &[6, 8]),
            random(&mut rng, &[8, 8]),
            random(&mut rng, &[8, 4]),
            random(&mut rng, &[4, 8]),
        );
        let (o1, base) = run(&x, &w, &a, &b, 4.0 / 4.0);
        let (o2, _) = run(&x, &w, &a, &b, 8.0 / 4.0);
        for i in 0..o1.len() {
            assert!(((o2[i] - base[i]) - 2.0 * (o1[i] - base[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_rank_is_bounded_by_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = 2;
        let (x, w, a, b) = (
            random(&mut rng, &[10, 8]),
            random(&mut rng, &[8, 8]),
            random(&mut rng, &[8, r]),
            random(&mut rng, &[r, 8]),
        );
        let (out, base) = run(&x, &w, &a, &b, 2.0);
        let delta: Vec<f64> = out.iter().zip(&base).map(|(o, b)| o - b).collect();
        assert_eq!(numeric_rank(delta, 10, 8, 1e-9), r);
    }

    /// Rank via Gaussian elimination with partial pivoting.
    fn numeric_rank(mut m: Vec<f64>, rows: usize, cols: usize, tol: f64) -> usize {
        let mut rank = 0;
        for c in 0..cols {
            let pivot = (rank..rows).max_by(|&i, &j| m[i * cols + c].abs().total_cmp(&m[j * cols + c].abs()));
            let Some(p) = pivot else { break };
            if m[p * cols + c].abs() < tol {
                continue;
            }
            for k in 0..cols {
                m.swap(rank * cols + k, p * cols + k);
            }
            for i in rank + 1..rows {
                let f = m[i * cols + c] / m[rank * cols + c];
                for k in c..cols {
                    m[i * cols + k] -= f * m[rank * cols + k];
                }
            }
            rank += 1;
        }
        rank
    }
}
