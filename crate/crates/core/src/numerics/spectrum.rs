use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magnitude of the 2-D DFT of an `H×W` map, DC moved to `(H/2, W/2)`.
pub fn fft2_magnitude<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.ndim(), 2, "fft2_magnitude expects H×W");
    let (h, w) = (x.dim(0), x.dim(1));
    let mut buf: Vec<Complex<f64>> = x
        .data()
        .iter()
        .map(|v| Complex::new(v.as_f64(), 0.0))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let rows = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        rows.process(row);
    }
    let cols = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        cols.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }

    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let dst = ((r + h / 2) % h) * w + (c + w / 2) % w;
            out[dst] = T::lit(buf[r * w + c].norm());
        }
    }
    Tensor::from_vec(&[h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_dc_only() {
        for &(h, w) in &[(8, 8), (5, 7), (6, 3)] {
            let m = fft2_magnitude(&Tensor::<f64>::full(&[h, w], 2.0));
            for r in 0..h {
                for c in 0..w {
                    let v = m.at(&[r, c]);
                    if (r, c) == (h / 2, w / 2) {
                        assert!((v - 2.0 * (h * w) as f64).abs() < 1e-9);
                    } else {
                        assert!(v.abs() < 1e-9, "({r},{c}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn impulse_is_flat() {
        let mut x = Tensor::<f64>::zeros(&[6, 10]);
        x.set(&[2, 7], 1.0);
        let m = fft2_magnitude(&x);
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
