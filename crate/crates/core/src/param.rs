//! Trainable parameters and the Adam optimizer with decoupled weight decay.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
    /// Whether weight decay applies. Off for biases.
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            grad: None,
            step_count: 0,
            decay,
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::shape("accumulate_grad", self.value.shape(), g.shape()));
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One AdamW update over `params`; consumes and clears their gradients.
///
/// Every parameter must carry a gradient. The decay term is applied to the
/// value directly (`θ ← θ − lr·(m̂/(√v̂+ε) + λθ)`), never folded into the
/// gradient moments.
pub fn adam_step<T: Scalar>(params: &mut [Parameter<T>], cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter() {
        p.grad.as_ref().expect("checked").ensure_finite(&format!("gradient of {}", p.name))?;
    }
    let f = T::from_f64_lossy;
    let (b1, b2, eps, lr, wd) = (f(cfg.beta1), f(cfg.beta2), f(cfg.eps), f(cfg.lr), f(cfg.weight_decay));
    let one = T::one();
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bias1 = one - b1.powi(t);
        let bias2 = one - b2.powi(t);
        let decay = if p.decay { wd } else { T::zero() };
        let grad = p.grad.take().expect("checked");
        let values = p.value.data_mut();
        let ms = p.adam_m.data_mut();
        let vs = p.adam_v.data_mut();
        for (((theta, m), v), &g) in values.iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut()).zip(grad.data()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *theta);
        }
    }
    Ok(())
}

/// Owns every parameter of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, param: Parameter<T>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    /// Weight of shape `[fan_in, fan_out]` drawn from
    /// `uniform(-1/√fan_in, 1/√fan_in)`.
    pub fn add_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        let value = Tensor::new(vec![fan_in, fan_out], data).expect("shape");
        self.add(Parameter::new(name, value, true))
    }

    pub fn add_bias(&mut self, name: &str, width: usize) -> ParamId {
        self.add(Parameter::new(name, Tensor::zeros(&[width]), false))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        adam_step(&mut self.params, cfg)
    }

    /// Copies values (not optimizer state) from `other`, which must have the
    /// same layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!("parameter `{}` does not match `{}`", dst.name, src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64, decay: bool) -> Vec<Parameter<f64>> {
        let mut p = Parameter::new("w", Tensor::scalar(value), decay);
        p.grad = Some(Tensor::scalar(grad));
        vec![p]
    }

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut ps = single(0.7, 0.0, true);
        adam_step(&mut ps, &cfg(0.01, 0.0)).unwrap();
        assert_eq!(ps[0].value.item(), 0.7);
        assert_eq!(ps[0].step_count, 1);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g = 1 and v̂ = g² = 1 after bias correction.
        let mut ps = single(0.5, 1.0, true);
        adam_step(&mut ps, &cfg(0.01, 0.0)).unwrap();
        let expected = 0.5 - 0.01 / (1.0 + 1e-8);
        assert!((ps[0].value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_scales_value() {
        let mut ps = single(2.0, 0.0, true);
        adam_step(&mut ps, &cfg(0.01, 0.1)).unwrap();
        assert!((ps[0].value.item() - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        let mut bias = single(2.0, 0.0, false);
        adam_step(&mut bias, &cfg(0.01, 0.1)).unwrap();
        assert_eq!(bias[0].value.item(), 2.0);
    }

    #[test]
    fn zero_lr_never_moves() {
        let mut ps = single(-1.25, 123.0, true);
        for _ in 0..3 {
            ps[0].grad = Some(Tensor::scalar(-7.0));
            adam_step(&mut ps, &cfg(0.0, 0.5)).unwrap();
        }
        assert_eq!(ps[0].value.item(), -1.25);
        assert_eq!(ps[0].step_count, 3);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut ps = vec![Parameter::new("integ_1.weight", Tensor::<f64>::scalar(1.0), true)];
        match adam_step(&mut ps, &AdamConfig::default()) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "integ_1.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
