//! Architecture graphs, parameters, execution and checkpoints.

mod arch;
mod checkpoint;
mod exec;
mod gradcheck;
mod params;

pub use arch::{
    build_by_id, build_rfbsnet, build_rfbsnet_desk, infer_shapes, known_arch_ids, ArchitectureSpec, GraphBuilder,
    LayerKind, Node, NodeId, RfbsConfig, DESK_ARCH_ID, DESK_TCONV_HEAD_ARCH_ID, FUSED_CHANNELS,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use exec::{backward, forward, predict, Gradients, Tape};
pub use gradcheck::network_grad_check;
pub use params::{he_bound, init_params, ParameterStore};
