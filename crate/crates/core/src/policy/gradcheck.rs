use super::PolicyError;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn dim(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, value: f64);
    fn loss(&self) -> f64;
    fn gradient(&self) -> Vec<f64>;
}

/// Largest relative disagreement between the analytic gradient and central
/// differences over `coords` (all coordinates when `None`).
///
/// Each coordinate's error is `|a − n| / max(|a|, |n|, floor)` where `floor` is
/// `1e-3` times the largest analytic component, so components that are tiny
/// relative to the gradient as a whole are compared in absolute terms.
pub fn gradient_check<D: Differentiable>(f: &mut D, eps: f64, coords: Option<&[usize]>) -> Result<f64, PolicyError> {
    assert!((1e-6..=1e-3).contains(&eps), "eps must lie in [1e-6, 1e-3]");
    let analytic = f.gradient();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::NonFiniteGradient);
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..f.dim()).collect();
            &all
        }
    };
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for &i in coords {
        let x = f.get(i);
        f.set(i, x + eps);
        let up = f.loss();
        f.set(i, x - eps);
        let down = f.loss();
        f.set(i, x);
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(PolicyError::NonFiniteGradient);
        }
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::softmax;

    /// Cross-entropy of softmax(W·x) against a fixed target.
    struct SoftmaxXent {
        w: Vec<f64>,
        x: Vec<f64>,
        target: usize,
        classes: usize,
        corrupt: bool,
    }

    impl SoftmaxXent {
        fn logits(&self) -> Vec<f64> {
            let k = self.x.len();
            (0..self.classes).map(|c| (0..k).map(|j| self.w[c * k + j] * self.x[j]).sum()).collect()
        }
    }

    impl Differentiable for SoftmaxXent {
        fn dim(&self) -> usize {
            self.w.len()
        }
        fn get(&self, i: usize) -> f64 {
            self.w[i]
        }
        fn set(&mut self, i: usize, v: f64) {
            self.w[i] = v;
        }
        fn loss(&self) -> f64 {
            -softmax(&self.logits())[self.target].ln()
        }
        fn gradient(&self) -> Vec<f64> {
            let p = softmax(&self.logits());
            let k = self.x.len();
            let mut g = vec![0.0; self.w.len()];
            for c in 0..self.classes {
                let d = p[c] - if c == self.target { 1.0 } else { 0.0 };
                for j in 0..k {
                    g[c * k + j] = d * self.x[j];
                }
            }
            if self.corrupt {
                for v in &mut g[..k] {
                    *v *= 2.0;
                }
            }
            g
        }
    }

    fn layer(corrupt: bool) -> SoftmaxXent {
        SoftmaxXent {
            w: (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
            x: vec![0.5, -1.0, 2.0],
            target: 2,
            classes: 4,
            corrupt,
        }
    }

    #[test]
    fn exact_layer_passes() {
        assert!(gradient_check(&mut layer(false), 1e-5, None).unwrap() < 1e-6);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        assert!(gradient_check(&mut layer(true), 1e-5, None).unwrap() > 0.1);
    }

    #[test]
    fn parameters_are_restored() {
        let mut f = layer(false);
        let before = f.w.clone();
        gradient_check(&mut f, 1e-4, Some(&[0, 5])).unwrap();
        assert_eq!(f.w, before);
    }
}
