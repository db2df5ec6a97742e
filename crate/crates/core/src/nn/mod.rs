//! Neural building blocks: LSTM, additive attention, parameter storage,
//! initialization, Adam and the checkpoint container.

mod adam;
mod attention;
mod checkpoint;
mod init;
mod lstm;
mod params;

pub use adam::{Adam, AdamConfig};
pub use attention::{Attended, Attention};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use init::{init_params, init_uniform, INIT_SCALE};
pub use lstm::{Lstm, LstmRun, LstmState};
pub use params::{Bound, ParamId, ParamStore};
