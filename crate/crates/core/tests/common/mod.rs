//! Shared test oracles, independent of the library's training path.

/// Plain logistic regression fitted by full-batch gradient descent on raw
/// arrays. Used as an independent accuracy oracle.
pub struct LogisticOracle {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticOracle {
    pub fn fit(features: &[Vec<f64>], labels: &[u8], steps: usize, lr: f64) -> Self {
        let d = features[0].len();
        let n = features.len();
        let mut weights = vec![0.0; d];
        let mut bias = 0.0;
        for _ in 0..steps {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let z: f64 = x.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() + bias;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - f64::from(y);
                for (g, a) in gw.iter_mut().zip(x) {
                    *g += err * a;
                }
                gb += err;
            }
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= lr * g / n as f64;
            }
            bias -= lr * gb / n as f64;
        }
        Self { weights, bias }
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let z: f64 = x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias;
        u8::from(z >= 0.0)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / labels.len() as f64
    }
}

/// Row-major tensor rows as plain vectors.
pub fn rows_of(t: &fairvae_core::autodiff::Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}
