//! Parameter initializers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Normal(0, std²) resampled until it falls within two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Matrix with orthonormal columns (or rows, when `rows < cols`).
///
/// Tensors of rank > 2 are flattened to `[prod(leading) × last]`.
pub fn orthonormal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let cols = *shape.last().expect("non-empty shape");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so the result is uniformly distributed
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    Tensor::from_fn(shape, |i| q[(i / cols, i % cols)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = truncated_normal(&[100, 50], 0.075, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.15 + 1e-15));
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for shape in [[12usize, 5], [5, 12]] {
            let t = orthonormal(&shape, &mut rng);
            let (r, c) = (shape[0], shape[1]);
            let m = DMatrix::from_row_slice(r, c, t.data());
            let gram = if r >= c { m.transpose() * &m } else { &m * m.transpose() };
            let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
            assert!((gram - eye).abs().max() < 1e-12);
        }
    }
}
