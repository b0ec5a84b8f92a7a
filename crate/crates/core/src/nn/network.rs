//! Feed-forward trunk with several fully connected heads branching from the
//! last trunk activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PcnError, Result};
use crate::tensor::{Real, Tensor};

use super::layers::{
    conv2d, conv2d_backward, conv_output_dims, fc, fc_backward, maxpool, maxpool_backward, relu,
    relu_backward, ConvLayer, FcLayer, Param,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Fc,
    Relu,
}

/// Architecture description for one trunk layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out: usize, k: usize, s: usize },
    MaxPool { k: usize, s: usize },
    Fc { out: usize },
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub in_side: usize,
    pub trunk: Vec<LayerSpec>,
    /// Output width of each head.
    pub heads: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    MaxPool { k: usize, s: usize },
    Fc(FcLayer<T>),
    Relu,
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Fc(_) => LayerKind::Fc,
            Layer::Relu => LayerKind::Relu,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Fc(f) => vec![&mut f.weight, &mut f.bias],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Fc(f) => vec![&f.weight, &f.bias],
            _ => Vec::new(),
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(ConvLayer {
                kernel: c.kernel,
                stride: c.stride,
                weight: c.weight.cast(),
                bias: c.bias.cast(),
            }),
            Layer::MaxPool { k, s } => Layer::MaxPool { k: *k, s: *s },
            Layer::Fc(f) => Layer::Fc(FcLayer {
                weight: f.weight.cast(),
                bias: f.bias.cast(),
            }),
            Layer::Relu => Layer::Relu,
        }
    }
}

/// Activations recorded by [`Network::forward_trace`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
    features: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub in_channels: usize,
    pub in_side: usize,
    pub trunk: Vec<Layer<T>>,
    pub heads: Vec<FcLayer<T>>,
}

impl<T: Real> Network<T> {
    /// Builds a zero-initialized network, validating every layer shape.
    pub fn build(spec: &NetSpec) -> Result<Self> {
        let (mut c, mut h, mut w) = (spec.in_channels, spec.in_side, spec.in_side);
        let mut flat: Option<usize> = None;
        let mut trunk = Vec::with_capacity(spec.trunk.len());
        for layer in &spec.trunk {
            match *layer {
                LayerSpec::Conv { out, k, s } => {
                    if flat.is_some() {
                        return Err(PcnError::shape("conv after fc"));
                    }
                    let (oh, ow) = conv_output_dims(h, w, k, s)?;
                    trunk.push(Layer::Conv(ConvLayer::new(c, out, k, s)));
                    (c, h, w) = (out, oh, ow);
                }
                LayerSpec::MaxPool { k, s } => {
                    if flat.is_some() {
                        return Err(PcnError::shape("pooling after fc"));
                    }
                    (h, w) = conv_output_dims(h, w, k, s)?;
                    trunk.push(Layer::MaxPool { k, s });
                }
                LayerSpec::Fc { out } => {
                    let n_in = flat.unwrap_or(c * h * w);
                    trunk.push(Layer::Fc(FcLayer::new(n_in, out)));
                    flat = Some(out);
                }
                LayerSpec::Relu => trunk.push(Layer::Relu),
            }
        }
        let features = flat.unwrap_or(c * h * w);
        if spec.heads.is_empty() {
            return Err(PcnError::shape("network needs at least one head"));
        }
        let heads = spec
            .heads
            .iter()
            .map(|&n| FcLayer::new(features, n))
            .collect();
        Ok(Network {
            in_channels: spec.in_channels,
            in_side: spec.in_side,
            trunk,
            heads,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_side, self.in_side]
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.n_out()).collect()
    }

    /// Total number of outputs across all heads.
    pub fn output_len(&self) -> usize {
        self.heads.iter().map(|h| h.n_out()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.trunk
            .iter()
            .flat_map(|l| l.params())
            .chain(self.heads.iter().flat_map(|h| [&h.weight, &h.bias]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        for l in self.trunk.iter_mut() {
            out.extend(l.params_mut());
        }
        for h in self.heads.iter_mut() {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.chw();
        if [c, h, w] != self.input_shape() {
            return Err(PcnError::shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        Ok(match layer {
            Layer::Conv(c) => (conv2d(x, c)?, None),
            Layer::MaxPool { k, s } => {
                let (y, idx) = maxpool(x, *k, *s)?;
                (y, Some(idx))
            }
            Layer::Fc(f) => (fc(x, f)?, None),
            Layer::Relu => (relu(x), None),
        })
    }

    fn heads_forward(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.output_len());
        for h in &self.heads {
            out.extend_from_slice(fc(features, h)?.data());
        }
        Ok(out)
    }

    /// Raw head outputs (logits and regressions), concatenated in head order.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.trunk {
            cur = Self::layer_forward(layer, &cur)?.0;
        }
        self.heads_forward(&cur)
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Vec<T>, Trace<T>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut argmax = Vec::with_capacity(self.trunk.len());
        let mut cur = x.clone();
        for layer in &self.trunk {
            let (next, idx) = Self::layer_forward(layer, &cur)?;
            inputs.push(cur);
            argmax.push(idx);
            cur = next;
        }
        let out = self.heads_forward(&cur)?;
        Ok((
            out,
            Trace {
                inputs,
                argmax,
                features: cur,
            },
        ))
    }

    /// Accumulates parameter gradients for one sample and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, trace: &Trace<T>, grad_out: &[T]) -> Result<Tensor<T>> {
        if grad_out.len() != self.output_len() {
            return Err(PcnError::shape(format!(
                "expected {} output gradients, got {}",
                self.output_len(),
                grad_out.len()
            )));
        }
        let mut grad_feat = Tensor::zeros(trace.features.shape());
        let mut offset = 0;
        for h in self.heads.iter_mut() {
            let n = h.n_out();
            let g = Tensor::from_vec(&[n], grad_out[offset..offset + n].to_vec())?;
            offset += n;
            let gi = fc_backward(&trace.features, h, &g)?;
            for (a, &b) in grad_feat.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
        let mut grad = grad_feat;
        for (i, layer) in self.trunk.iter_mut().enumerate().rev() {
            let input = &trace.inputs[i];
            grad = match layer {
                Layer::Conv(c) => {
                    let g = grad.reshape(&conv_out_shape(c, input)?)?;
                    conv2d_backward(input, c, &g)?
                }
                Layer::MaxPool { .. } => {
                    let idx = trace.argmax[i].as_ref().expect("pool argmax recorded");
                    maxpool_backward(input.shape(), idx, &grad)?
                }
                Layer::Fc(f) => fc_backward(input, f, &grad)?,
                Layer::Relu => relu_backward(input, &grad)?,
            };
        }
        Ok(grad)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            in_channels: self.in_channels,
            in_side: self.in_side,
            trunk: self.trunk.iter().map(|l| l.cast()).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| FcLayer {
                    weight: h.weight.cast(),
                    bias: h.bias.cast(),
                })
                .collect(),
        }
    }
}

fn conv_out_shape<T: Real>(c: &ConvLayer<T>, input: &Tensor<T>) -> Result<[usize; 3]> {
    let (_, h, w) = input.chw();
    let (oh, ow) = c.output_dims(h, w)?;
    Ok([c.out_channels(), oh, ow])
}

/// How weights are drawn; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// `N(0, std^2)` for every conv and fc weight.
    Fixed(f64),
    /// Trunk weights `N(0, 2 / fan_in)`; head weights `N(0, head_std^2)`.
    FanIn { head_std: f64 },
}

/// Draws every conv and fc weight from `N(0, std^2)` with a seeded generator
/// and zeroes all biases and optimizer state.
pub fn gaussian_init<T: Real>(net: &mut Network<T>, std: f64, seed: u64) {
    init_weights(net, WeightInit::Fixed(std), seed);
}

pub fn init_weights<T: Real>(net: &mut Network<T>, init: WeightInit, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_weight = |p: &mut Param<T>, std: f64| {
        let normal = (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"));
        for v in p.value.data_mut() {
            *v = match &normal {
                Some(n) => T::from_f64c(n.sample(&mut rng)),
                None => T::zero(),
            };
        }
    };
    let trunk_std = |p: &Param<T>| match init {
        WeightInit::Fixed(std) => std,
        WeightInit::FanIn { .. } => {
            let fan_in: usize = p.value.shape()[1..].iter().product();
            (2.0 / fan_in as f64).sqrt()
        }
    };
    let head_std = match init {
        WeightInit::Fixed(std) => std,
        WeightInit::FanIn { head_std } => head_std,
    };
    for layer in net.trunk.iter_mut() {
        match layer {
            Layer::Conv(c) => {
                let std = trunk_std(&c.weight);
                init_weight(&mut c.weight, std)
            }
            Layer::Fc(f) => {
                let std = trunk_std(&f.weight);
                init_weight(&mut f.weight, std)
            }
            _ => {}
        }
    }
    for h in net.heads.iter_mut() {
        init_weight(&mut h.weight, head_std);
    }
    for p in net.params_mut() {
        if p.value.shape().len() == 1 {
            p.value.fill(T::zero());
        }
        p.grad.fill(T::zero());
        p.velocity.fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetSpec {
        NetSpec {
            in_channels: 1,
            in_side: 6,
            trunk: vec![
                LayerSpec::Conv { out: 2, k: 3, s: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, s: 2 },
                LayerSpec::Fc { out: 4 },
                LayerSpec::Relu,
            ],
            heads: vec![2, 3],
        }
    }

    #[test]
    fn build_validates_shapes() {
        let net = Network::<f32>::build(&tiny_spec()).unwrap();
        assert_eq!(net.output_len(), 5);
        assert_eq!(net.head_sizes(), vec![2, 3]);
        // conv 2*1*9+2, fc 4*8+4, heads 2*4+2 + 3*4+3
        assert_eq!(net.param_count(), 20 + 36 + 10 + 15);

        let mut bad = tiny_spec();
        bad.in_side = 2;
        assert!(Network::<f32>::build(&bad).is_err());
    }

    #[test]
    fn gaussian_init_is_deterministic() {
        let mut a = Network::<f32>::build(&tiny_spec()).unwrap();
        let mut b = a.clone();
        gaussian_init(&mut a, 0.01, 42);
        gaussian_init(&mut b, 0.01, 42);
        assert_eq!(a, b);
        let mut c = a.clone();
        gaussian_init(&mut c, 0.01, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_init_zero_std() {
        let mut a = Network::<f32>::build(&tiny_spec()).unwrap();
        gaussian_init(&mut a, 0.0, 1);
        assert!(a.params().iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gaussian_init_sample_std() {
        let spec = NetSpec {
            in_channels: 1,
            in_side: 1,
            trunk: vec![LayerSpec::Fc { out: 1000 }],
            heads: vec![100],
        };
        let mut net = Network::<f64>::build(&spec).unwrap();
        gaussian_init(&mut net, 0.01, 7);
        let w = net.heads[0].weight.value.data();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.05 * 0.01);
        assert!(net.heads[0].bias.value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = Network::<f32>::build(&tiny_spec()).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 5, 5])).is_err());
        assert_eq!(net.forward(&Tensor::zeros(&[1, 6, 6])).unwrap().len(), 5);
    }
}
