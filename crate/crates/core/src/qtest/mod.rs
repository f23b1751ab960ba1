//! The quantum-infused teacher-student node: base network, projection,
//! L2-tanh normalization, circuit head, augmentations and training.

mod augment;
mod network;
mod node;
mod train;

pub use augment::{
    apply_strong_op, box_blur, flip, sample_strong, shift, strong_augment, weak_augment, Axis, StrongOp, WeakParams, BLUR_KERNELS,
    BRIGHTNESS, DEFAULT_OPS_PER_SAMPLE, FLIP_PROB, MENU_LEN, ROTATION_DEG, SCALE, SHEAR, TRANSLATE, WEAK_TRANSLATE,
};
pub use network::{l2_tanh_normalize, l2_tanh_rows, BaseConfig, BaseNetwork};
pub use node::{consistency_loss, ema_update, NodeForward, NodeModel, Role, DEFAULT_MU};
pub use train::{evaluate, history_csv, train_node, LambdaSchedule, NodeConfig, NodeData, NodeHistoryRow, NodeOutcome};
pub(crate) use train::holdout;
