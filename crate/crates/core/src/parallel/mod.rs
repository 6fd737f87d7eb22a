//! Simulated multi-rank execution: sequence parallelism for LSM and
//! attention layers, tensor-parallel shard checks, and a data × sequence
//! grid, all with communication accounting.

mod data;
mod group;
mod hybrid;
mod sequence;
mod tensor_parallel;

pub use data::{data_sequence_step, sp_loss, GridStep, ParallelConfig};
pub use group::{read_comm_trace, write_comm_trace, CommKind, CommRecord, Mailbox, RankGroup, Schedule};
pub use hybrid::hybrid_sp_forward;
pub use sequence::{
    prefix_states, prefix_sum_states, prefix_sum_states_decayed, sp_attention_allgather, sp_attention_heads,
    sp_forward_masked, sp_forward_nomask, sp_lsm_heads, ChunkedSequence, StateShare,
};
pub use tensor_parallel::{tp_shard_check, tp_shard_mixer, TpReport};
