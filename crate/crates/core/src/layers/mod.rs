//! Static, vanilla dynamic and DCD convolution layers.

mod conv;
mod latent;
mod spec;

pub use conv::{
    dcd_weight_1x1, dcd_weight_depthwise, dcd_weight_kxk_channel_only, dcd_weight_kxk_joint, dcd_weight_sparse, init_tensor, param_seed,
    vanilla_weight, ConvLayer, ForwardCtx, BN_EPS, BN_MOMENTUM,
};
pub use latent::{default_latent_dim, default_latent_dims_kxk, scaled_latent_dim, LatentDims};
pub use spec::{Act, Category, ConvSpec, DcdConfig, DcdVariant, Dynamic, Init, ParamDecl, Role, VanillaConfig};
