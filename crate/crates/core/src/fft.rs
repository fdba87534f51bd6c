//! Square 2-D FFTs of real grids, used by the convolutional read-out.
//!
//! Only the non-negative horizontal frequencies are kept, so a spectrum has
//! `(m/2 + 1) * m` entries. The forward transform leaves it transposed
//! (row `kx`, column `ky`); the inverse expects that layout. Pointwise
//! products between spectra from the same transform are unaffected.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Real rows are transformed two at a time by packing them into the real
/// and imaginary parts of one complex line.
#[derive(Clone)]
pub(crate) struct Fft2 {
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("m", &self.m).finish()
    }
}

impl Fft2 {
    pub(crate) fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            m,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        }
    }

    pub(crate) fn size(&self) -> usize {
        self.m
    }

    /// Number of complex entries in a spectrum.
    pub(crate) fn spectrum_len(&self) -> usize {
        (self.m / 2 + 1) * self.m
    }

    fn scratch(&self) -> Vec<Complex64> {
        let len = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        vec![Complex64::default(); len]
    }

    /// Spectrum of a `width x height` row-major grid zero-padded to `m x m`.
    pub(crate) fn forward(&self, grid: &[f64], width: usize, height: usize) -> Vec<Complex64> {
        let m = self.m;
        let half = m / 2 + 1;
        assert!(width <= m && height <= m && grid.len() == width * height);
        let mut spec = vec![Complex64::default(); half * m];
        let mut line = vec![Complex64::default(); m];
        let mut scratch = self.scratch();
        for y in (0..height).step_by(2) {
            line.fill(Complex64::default());
            let second = y + 1 < height;
            for x in 0..width {
                line[x].re = grid[y * width + x];
                if second {
                    line[x].im = grid[(y + 1) * width + x];
                }
            }
            self.fwd.process_with_scratch(&mut line, &mut scratch);
            for kx in 0..half {
                let z = line[kx];
                let zc = line[(m - kx) % m].conj();
                spec[kx * m + y] = (z + zc) * 0.5;
                if second {
                    spec[kx * m + y + 1] = (z - zc) * Complex64::new(0.0, -0.5);
                }
            }
        }
        for col in spec.chunks_exact_mut(m) {
            self.fwd.process_with_scratch(col, &mut scratch);
        }
        spec
    }

    /// Inverse of [`Fft2::forward`], scaled by `1/m²`, consuming the spectrum.
    /// Returns the first `needed_rows` rows of the `m x m` grid, row stride `m`.
    pub(crate) fn inverse(&self, mut spec: Vec<Complex64>, needed_rows: usize) -> Vec<f64> {
        let m = self.m;
        let half = m / 2 + 1;
        debug_assert_eq!(spec.len(), half * m);
        let mut scratch = self.scratch();
        for col in spec.chunks_exact_mut(m) {
            self.inv.process_with_scratch(col, &mut scratch);
        }
        let rows = needed_rows.min(m);
        let mut out = vec![0.0; rows * m];
        let mut line = vec![Complex64::default(); m];
        let norm = 1.0 / (m * m) as f64;
        // Each row is real, so its missing frequencies are conjugates of kept ones.
        let row_spectrum = |y: usize, kx: usize| {
            if kx < half {
                spec[kx * m + y]
            } else {
                spec[(m - kx) * m + y].conj()
            }
        };
        for y in (0..rows).step_by(2) {
            let second = y + 1 < rows;
            for (kx, v) in line.iter_mut().enumerate() {
                let a = row_spectrum(y, kx);
                *v = if second {
                    let b = row_spectrum(y + 1, kx);
                    a + Complex64::new(-b.im, b.re)
                } else {
                    a
                };
            }
            self.inv.process_with_scratch(&mut line, &mut scratch);
            for x in 0..m {
                out[y * m + x] = line[x].re * norm;
                if second {
                    out[(y + 1) * m + x] = line[x].im * norm;
                }
            }
        }
        out
    }
}
