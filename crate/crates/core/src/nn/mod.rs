//! Parameters, initialization, optimization, and gradient checking on top of
//! the tensor graph.

mod adam;
mod ctx;
pub mod gradcheck;
mod init;
mod params;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use ctx::{
    apply_bn_stats, declare_bn, declare_conv, declare_conv_bn_prelu, declare_deconv, declare_prelu, BnMode, Ctx,
};
pub use gradcheck::{check_inputs, check_params, GradCheckReport};
pub use init::{fans, xavier_bound, xavier_uniform, Init};
pub use params::{name_seed, ParamStore};
