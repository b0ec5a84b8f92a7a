//! Minimal CNN toolkit: the layers, losses and optimizer the three cascade
//! networks need, generic over `f32`/`f64`.

mod gemm;
mod layers;
mod loss;
pub mod model_io;
mod network;
mod optim;

pub use layers::{
    conv2d, conv2d_backward, fc, fc_backward, maxpool, maxpool_backward, relu, relu_backward,
    softmax, softmax_tensor, ConvLayer, FcLayer, Param,
};
pub use loss::{cross_entropy_loss, smooth_l1, softmax_cross_entropy, PROB_EPS};
pub use network::{gaussian_init, init_weights, Layer, LayerKind, LayerSpec, NetSpec, Network, Trace, WeightInit};
pub use optim::{sgd_step, OptimState};
