use serde::{Deserialize, Serialize};

/// Running per-feature mean and standard deviation with output clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Lower bound on the standard deviation.
    pub eps: f64,
    pub clip: f64,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
            count: 0.0,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            eps: 1e-2,
            clip: 5.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    /// Accumulates samples and refreshes the statistics.
    pub fn update<'a>(&mut self, samples: impl IntoIterator<Item = &'a [f64]>) {
        for s in samples {
            debug_assert_eq!(s.len(), self.dim());
            for (k, v) in s.iter().enumerate() {
                self.sum[k] += v;
                self.sumsq[k] += v * v;
            }
            self.count += 1.0;
        }
        if self.count > 0.0 {
            for k in 0..self.dim() {
                let m = self.sum[k] / self.count;
                let var = (self.sumsq[k] / self.count - m * m).max(0.0);
                self.mean[k] = m;
                self.std[k] = var.sqrt().max(self.eps);
            }
        }
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..x.len() {
            out[k] = ((x[k] - self.mean[k]) / self.std[k]).clamp(-self.clip, self.clip);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }

    /// Inverse of [`Self::normalize`] for values inside the clip range.
    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(k, v)| v * self.std[k] + self.mean[k]).collect()
    }
}
