//! One-dimensional complex FFT plans.
//!
//! Lengths whose prime factors are all at most [`MAX_DIRECT_RADIX`] use a
//! recursive mixed-radix decimation-in-time transform; anything with a larger
//! prime factor goes through Bluestein's chirp-z algorithm on a power-of-two
//! convolution. Transforms are unnormalized in both directions.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Largest prime factor handled by a direct butterfly.
pub const MAX_DIRECT_RADIX: usize = 61;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Algorithm {
    MixedRadix {
        factors: Vec<usize>,
        twiddles: Vec<Complex64>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel_spectrum: Vec<Complex64>,
        forward: Box<FftPlan>,
        inverse: Box<FftPlan>,
    },
}

#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    algorithm: Algorithm,
}

pub fn factorize(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    // Radix 4 first keeps the recursion shallow for powers of two.
    while n.is_multiple_of(4) {
        out.push(4);
        n /= 4;
    }
    let mut p = 2;
    while p * p <= n {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

impl FftPlan {
    pub fn new(len: usize, direction: Direction) -> FftPlan {
        assert!(len > 0, "FFT length must be positive");
        let factors = factorize(len);
        let largest = factors.iter().copied().max().unwrap_or(1);
        let algorithm = if largest <= MAX_DIRECT_RADIX || len <= MAX_DIRECT_RADIX {
            let sign = direction.sign();
            let twiddles = (0..len)
                .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / len as f64))
                .collect();
            Algorithm::MixedRadix { factors, twiddles }
        } else {
            Self::bluestein(len, direction)
        };
        FftPlan { len, algorithm }
    }

    fn bluestein(len: usize, direction: Direction) -> Algorithm {
        let sign = direction.sign();
        let m = (2 * len - 1).next_power_of_two();
        // chirp[n] = exp(sign * i*pi*n^2/len); n^2 is reduced mod 2*len to
        // keep the phase argument small.
        let chirp: Vec<Complex64> = (0..len)
            .map(|n| {
                let q = (n * n) % (2 * len);
                Complex64::from_polar(1.0, sign * PI * q as f64 / len as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for n in 1..len {
            kernel[n] = chirp[n].conj();
            kernel[m - n] = chirp[n].conj();
        }
        let forward = FftPlan::new(m, Direction::Forward);
        let inverse = FftPlan::new(m, Direction::Inverse);
        forward.process(&mut kernel);
        Algorithm::Bluestein {
            chirp,
            kernel_spectrum: kernel,
            forward: Box::new(forward),
            inverse: Box::new(inverse),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// In-place transform of `buf` (length must equal the plan length).
    pub fn process(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len);
        if self.len == 1 {
            return;
        }
        match &self.algorithm {
            Algorithm::MixedRadix { factors, twiddles } => {
                let input = buf.to_vec();
                mixed_radix(&input, 1, self.len, factors, twiddles, 1, buf);
            }
            Algorithm::Bluestein {
                chirp,
                kernel_spectrum,
                forward,
                inverse,
            } => {
                let m = kernel_spectrum.len();
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for n in 0..self.len {
                    a[n] = buf[n] * chirp[n];
                }
                forward.process(&mut a);
                for (x, k) in a.iter_mut().zip(kernel_spectrum) {
                    *x *= k;
                }
                inverse.process(&mut a);
                let scale = 1.0 / m as f64;
                for k in 0..self.len {
                    buf[k] = a[k] * chirp[k] * scale;
                }
            }
        }
    }
}

/// DFT of `x[0], x[stride], ..., x[(n-1)*stride]` into `out[..n]`.
/// `twiddles[j] = exp(sign*2*pi*i*j/N0)` for the top-level length `N0`, and
/// `tw_step = N0 / n`.
fn mixed_radix(
    x: &[Complex64],
    stride: usize,
    n: usize,
    factors: &[usize],
    twiddles: &[Complex64],
    tw_step: usize,
    out: &mut [Complex64],
) {
    if n == 1 {
        out[0] = x[0];
        return;
    }
    let p = factors[0];
    let m = n / p;
    for r in 0..p {
        mixed_radix(
            &x[r * stride..],
            stride * p,
            m,
            &factors[1..],
            twiddles,
            tw_step * p,
            &mut out[r * m..(r + 1) * m],
        );
    }
    let n0 = twiddles.len();
    let mut tmp = vec![Complex64::new(0.0, 0.0); p];
    for k in 0..m {
        for (r, t) in tmp.iter_mut().enumerate() {
            *t = out[r * m + k] * twiddles[(r * k * tw_step) % n0];
        }
        match p {
            2 => {
                out[k] = tmp[0] + tmp[1];
                out[k + m] = tmp[0] - tmp[1];
            }
            4 => {
                // w4 = twiddle for a quarter turn in the plan's direction.
                let w4 = twiddles[n0 / 4];
                let a = tmp[0] + tmp[2];
                let b = tmp[0] - tmp[2];
                let c = tmp[1] + tmp[3];
                let d = (tmp[1] - tmp[3]) * w4;
                out[k] = a + c;
                out[k + m] = b + d;
                out[k + 2 * m] = a - c;
                out[k + 3 * m] = b - d;
            }
            _ => {
                for q in 0..p {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (r, t) in tmp.iter().enumerate() {
                        acc += t * twiddles[(r * q * m * tw_step) % n0];
                    }
                    out[k + q * m] = acc;
                }
            }
        }
    }
}
