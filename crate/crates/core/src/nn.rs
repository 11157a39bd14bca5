//! Dense layers, MLPs, He initialization and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    pub(crate) fn code(self) -> (u8, f64) {
        match self {
            Activation::Identity => (0, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu(s) => (2, s),
            Activation::Sigmoid => (3, 0.0),
        }
    }

    pub(crate) fn from_code(code: u8, slope: f64) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu(slope),
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths: widths.to_vec(),
            hidden_activation: hidden,
            output_activation: output,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs at least two positive widths, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Parameters stored as `[W0, b0, W1, b1, ...]` with `W: [in × out]` and
/// `b: [1 × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

/// Graph handles produced by one forward pass.
pub struct MlpForward {
    pub output: Var,
    pub params: Vec<Var>,
}

impl Mlp {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for w in spec.layer_widths.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            let mut weight = rng.normal_tensor(&[w[0], w[1]]);
            weight.data_mut().iter_mut().for_each(|v| *v *= std);
            params.push(weight);
            params.push(Tensor::zeros(&[1, w[1]]));
        }
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layer_widths
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])])
            .collect();
        Ok(Mlp { spec, params })
    }

    /// Rebuilds from a flat parameter vector in layer order.
    pub fn from_flat(spec: MlpSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(dim_err("mlp_from_flat", &[spec.param_count()], &[flat.len()]));
        }
        let mut params = Vec::new();
        let mut at = 0;
        for w in spec.layer_widths.windows(2) {
            let nw = w[0] * w[1];
            params.push(Tensor::new(vec![w[0], w[1]], flat[at..at + nw].to_vec())?);
            at += nw;
            params.push(Tensor::new(vec![1, w[1]], flat[at..at + w[1]].to_vec())?);
            at += w[1];
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Forward pass; `trainable` decides whether parameters collect gradients.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<MlpForward> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p)
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let output = self.forward_with(g, x, &vars)?;
        Ok(MlpForward {
            output,
            params: vars,
        })
    }

    /// Forward pass using caller-supplied parameter vars (same layout as
    /// [`Mlp::params`]).
    pub fn forward_with(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.spec.input_width() {
            return Err(dim_err("mlp_forward", xs, &[self.spec.input_width()]));
        }
        let layers = self.spec.num_layers();
        let mut h = x;
        for l in 0..layers {
            let lin = g.matmul(h, vars[2 * l])?;
            let aff = g.add(lin, vars[2 * l + 1])?;
            let act = if l + 1 == layers {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            h = act.apply(g, aff)?;
        }
        Ok(h)
    }

    /// Forward pass on plain values, no gradients.
    pub fn eval(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, false)?.output;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid adam settings {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_params(config: AdamConfig, params: &[&Tensor]) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        AdamState::new(config, &sizes)
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam expects {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(Error::Contract(format!(
                    "adam tensor {i}: state {} vs param {} vs grad {}",
                    self.first_moment[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn relu_spec(widths: &[usize]) -> MlpSpec {
        MlpSpec::new(widths, Activation::Relu, Activation::Identity).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let spec = relu_spec(&[4, 8, 2]);
        let a = Mlp::init(spec.clone(), &mut Rng::new(1)).unwrap();
        let shapes: Vec<&[usize]> = a.params().iter().map(|p| p.shape()).collect();
        assert_eq!(shapes, vec![&[4, 8][..], &[1, 8], &[8, 2], &[1, 2]]);
        assert!(a.params()[1].data().iter().all(|&b| b == 0.0));
        let b = Mlp::init(spec, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_std_matches_he() {
        // fan_in = 2 → std 1
        let spec = relu_spec(&[2, 50_000]);
        let m = Mlp::init(spec, &mut Rng::new(9)).unwrap();
        let w = m.params()[0].data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn invalid_spec() {
        assert!(MlpSpec::new(&[3], Activation::Relu, Activation::Identity).is_err());
        assert!(MlpSpec::new(&[3, 0, 1], Activation::Relu, Activation::Identity).is_err());
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let m = Mlp::zeros(relu_spec(&[3, 5, 2])).unwrap();
        let out = m.eval(Tensor::filled(&[4, 3], 1.7)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let spec = relu_spec(&[3, 2]);
        let mut m = Mlp::init(spec, &mut Rng::new(2)).unwrap();
        m.params_mut()[1] = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let out = m.eval(x.clone()).unwrap();
        let w = &m.params()[0];
        for j in 0..2 {
            let expect: f64 =
                (0..3).map(|i| x.data()[i] * w.data()[i * 2 + j]).sum::<f64>() + [0.5, -1.0][j];
            assert!((out.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch() {
        let m = Mlp::zeros(relu_spec(&[3, 2])).unwrap();
        assert!(matches!(
            m.eval(Tensor::zeros(&[1, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mean_output_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(&[3, 6, 4, 2], Activation::LeakyRelu(0.01), Activation::Identity)
            .unwrap();
        let m = Mlp::init(spec, &mut Rng::new(4)).unwrap();
        let x = Rng::new(5).normal_tensor(&[5, 3]);
        let err = grad_check(
            |g, vars| {
                let xv = g.constant(x.clone());
                let out = m.forward_with(g, xv, vars)?;
                g.mean(out)
            },
            m.params(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &[1]).unwrap();
        st.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expect = -0.01 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[2]).unwrap();
        for _ in 0..1000 {
            st.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_length_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[2]).unwrap();
        assert!(matches!(
            st.step(&mut [&mut p], &[&[1.0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let spec = relu_spec(&[3, 8, 1]);
            let mut m = Mlp::init(spec, &mut Rng::new(8)).unwrap();
            let mut st = AdamState::new(AdamConfig::default(), &m.params().iter().map(Tensor::len).collect::<Vec<_>>()).unwrap();
            let mut rng = Rng::new(9);
            for _ in 0..100 {
                let x = rng.normal_tensor(&[4, 3]);
                let mut g = Graph::new();
                let xv = g.constant(x);
                let f = m.forward(&mut g, xv, true).unwrap();
                let sq = g.square(f.output).unwrap();
                let loss = g.mean(sq).unwrap();
                g.backward(loss).unwrap();
                let grads: Vec<Vec<f64>> =
                    f.params.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
                let gr: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
                let mut ps: Vec<&mut Tensor> = m.params_mut().iter_mut().collect();
                st.step(&mut ps, &gr).unwrap();
            }
            m.flat()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
