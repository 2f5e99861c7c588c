//! A small CPU autodiff engine: tensors, a recording tape, the operators
//! the three networks need, Adam, and weight serialisation.

mod conv;
mod graph;
mod layers;
mod loss;
mod norm;
mod optim;
mod params;
pub mod serialize;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv, ConvTranspose, GroupNorm, InstanceNorm, LayerNorm, Linear};
pub use loss::{bce_logit, giou_with_grad, soft_dice_with_grad};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::{Element, Tensor};

pub(crate) use graph::sigmoid;
