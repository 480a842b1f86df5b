//! Neural building blocks: GRU cell and stack, attention, dense head, and
//! the residual convolution block.

pub mod attention;
pub mod dense;
pub mod gru;
pub mod param;
pub mod residual;

pub use attention::{attend, attention};
pub use dense::Dense;
pub use gru::{gru_cell_step, gru_stack_forward, GruParams, GruStack};
pub use param::{bind, bind_frozen, Ctx, Param, Parameterized};
pub use residual::{residual_block, BatchNorm, Conv1d, ResidualBlockParams};
