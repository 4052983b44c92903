pub mod arch;
pub mod io;
pub mod store;

pub use arch::{ArchConfig, C2FArchitecture, LevelConfig, LevelSpec};
pub use io::{decode_weights, encode_weights, load_weights, save_weights};
pub use store::{Block, WeightStore};
