use super::ParamTensor;

/// Exponential moving average of a parameter list.
#[derive(Debug, Clone)]
pub struct EmaState {
    decay: f64,
    shadow: Vec<Vec<f64>>,
}

impl EmaState {
    /// Starts the shadow at the current parameter values.
    pub fn new<'a>(decay: f64, params: impl IntoIterator<Item = &'a ParamTensor>) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "EMA decay must lie in (0, 1)");
        Self {
            decay,
            shadow: params.into_iter().map(|p| p.values.clone()).collect(),
        }
    }

    pub fn from_shadow(decay: f64, shadow: Vec<Vec<f64>>) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "EMA decay must lie in (0, 1)");
        Self { decay, shadow }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }

    /// `shadow ← decay·shadow + (1−decay)·params`.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a ParamTensor>) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            assert_eq!(s.len(), p.values.len(), "EMA shadow shape mismatch for {}", p.name);
            for (sv, &pv) in s.iter_mut().zip(&p.values) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
    }

    /// Writes the shadow values into `params`.
    pub fn copy_to<'a>(&self, params: impl IntoIterator<Item = &'a mut ParamTensor>) {
        for (s, p) in self.shadow.iter().zip(params) {
            p.values.copy_from_slice(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point() {
        let p = ParamTensor::from_values("p", 1, 2, vec![0.3, -1.0]);
        let mut ema = EmaState::new(0.999, [&p]);
        ema.update([&p]);
        assert_eq!(ema.shadow()[0], p.values);
    }

    #[test]
    fn one_step_from_zero() {
        let zero = ParamTensor::zeros("p", 1, 1);
        let one = ParamTensor::from_values("p", 1, 1, vec![1.0]);
        let mut ema = EmaState::new(0.999, [&zero]);
        ema.update([&one]);
        assert!((ema.shadow()[0][0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn geometric_series() {
        let zero = ParamTensor::zeros("p", 1, 1);
        let c = ParamTensor::from_values("p", 1, 1, vec![2.5]);
        let mut ema = EmaState::new(0.999, [&zero]);
        for k in 1..=300 {
            ema.update([&c]);
            let expected = 2.5 * (1.0 - 0.999f64.powi(k));
            assert!((ema.shadow()[0][0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_to_overwrites() {
        let src = ParamTensor::from_values("p", 1, 1, vec![4.0]);
        let mut dst = ParamTensor::zeros("p", 1, 1);
        EmaState::new(0.5, [&src]).copy_to([&mut dst]);
        assert_eq!(dst.values, vec![4.0]);
    }
}
