//! Minimal 2D FFT helper on top of rustfft.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct Fft2d {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2d {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2d {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn transform(&self, data: &mut [Complex<f64>], inverse: bool) {
        assert_eq!(data.len(), self.width * self.height);
        let row = if inverse { &self.row_inv } else { &self.row_fwd };
        let col = if inverse { &self.col_inv } else { &self.col_fwd };
        for y in 0..self.height {
            row.process(&mut data[y * self.width..(y + 1) * self.width]);
        }
        let mut column = vec![Complex::default(); self.height];
        for x in 0..self.width {
            for y in 0..self.height {
                column[y] = data[y * self.width + x];
            }
            col.process(&mut column);
            for y in 0..self.height {
                data[y * self.width + x] = column[y];
            }
        }
    }

    /// Unnormalized forward DFT.
    pub fn forward(&self, data: &mut [Complex<f64>]) {
        self.transform(data, false);
    }

    /// Unnormalized inverse DFT (no 1/N scaling).
    pub fn inverse(&self, data: &mut [Complex<f64>]) {
        self.transform(data, true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_recovers_input() {
        let (w, h) = (12, 10);
        let orig: Vec<Complex<f64>> = (0..w * h)
            .map(|i| Complex::new(((i * 7) % 13) as f64, 0.0))
            .collect();
        let mut data = orig.clone();
        let fft = Fft2d::new(w, h);
        fft.forward(&mut data);
        fft.inverse(&mut data);
        let n = (w * h) as f64;
        for (a, b) in data.iter().zip(&orig) {
            assert!((a.re / n - b.re).abs() < 1e-10);
            assert!((a.im / n).abs() < 1e-10);
        }
    }
}
