//! Window attention across neighboring slices.

mod block;
mod msa;
pub mod window;

pub use block::{IfTrans, IfTransConfig, IfTransLayer, NeighborUpdate};
pub use msa::{csw_msa, w_msa, Msa};
pub use window::{
    cyclic_shift, partition_windows, relative_position_index, reverse_windows, shift_attention_mask, JointLayout,
    WindowGrid, MASK_NEG,
};
