//! On-disk layer-stack dumps and the synthetic stack generator.

mod stack;
pub mod synthetic;
mod tensor_file;

pub use stack::{
    attention_path, check_row_stochastic, layer_path, read_manifest, read_stack, write_stack,
    AttentionMode, LabelColumn, LayerStack, Manifest, Scale, TaskSpec, ATTENTION_ROW_TOL,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tensor_file::{Tensor, MAGIC, VERSION};
