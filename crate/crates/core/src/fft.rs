//! Radix-2 FFT and the analytic-signal envelope built on it.
//!
//! Twiddles come from `libm` so the transform is bit-reproducible on every
//! target, independent of the platform math library or SIMD dispatch.

use num_complex::Complex64;

pub(crate) struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    pub(crate) fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex64::new(libm::cos(a), libm::sin(a))
            })
            .collect();
        Self { n, twiddles }
    }

    /// Unnormalized in both directions.
    pub(crate) fn process(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n);
        let bits = n.trailing_zeros();
        if bits > 0 {
            for i in 0..n {
                let j = i.reverse_bits() >> (usize::BITS - bits);
                if j > i {
                    buf.swap(i, j);
                }
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let w = self.twiddles[j * step];
                    let w = if inverse { w.conj() } else { w };
                    let u = buf[start + j];
                    let v = buf[start + j + half] * w;
                    buf[start + j] = u + v;
                    buf[start + j + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// Magnitude of the analytic signal of `signal`, zero-padded to the next
/// power of two.
pub(crate) struct EnvelopeDetector {
    fft: Radix2,
    len: usize,
}

impl EnvelopeDetector {
    pub(crate) fn new(len: usize) -> Self {
        let n = len.next_power_of_two().max(2);
        Self {
            fft: Radix2::new(n),
            len,
        }
    }

    pub(crate) fn analytic(&self, signal: &[f64]) -> Vec<Complex64> {
        assert_eq!(signal.len(), self.len);
        let n = self.fft.n;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (b, &s) in buf.iter_mut().zip(signal) {
            b.re = s;
        }
        self.fft.process(&mut buf, false);
        for (k, b) in buf.iter_mut().enumerate() {
            if k == 0 || k == n / 2 {
                continue;
            }
            if k < n / 2 {
                *b *= 2.0;
            } else {
                *b = Complex64::new(0.0, 0.0);
            }
        }
        self.fft.process(&mut buf, true);
        let scale = 1.0 / n as f64;
        buf.truncate(self.len);
        for b in &mut buf {
            *b *= scale;
        }
        buf
    }

    pub(crate) fn envelope(&self, signal: &[f64]) -> Vec<f64> {
        self.analytic(signal).iter().map(|z| z.norm()).collect()
    }
}
