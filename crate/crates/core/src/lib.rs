pub mod baselines;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod matching;
pub mod mode;
pub mod model;
pub mod parallel;
pub mod params;
pub mod predict;
pub mod rtc;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use mode::Mode;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
