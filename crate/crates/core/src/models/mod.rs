//! Network definitions and role-tagged parameter sets.

mod mlp;
mod params;

pub use mlp::{
    apply_stats, bn_name, forward, init_mlp, layer_name, predict_class, Bound, Mlp, MlpConfig,
    ModelOutput, TapeOutput, HEAD,
};
pub use params::{
    clone_frozen, merge_params, overwrite_blocks, split_params, Grads, Group, ParamSet, Part, Role,
    Select,
};
