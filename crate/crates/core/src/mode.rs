use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::Var;

/// Forward-pass mode. Training carries the dropout rate and the RNG that
/// draws the masks.
pub enum Mode<'r> {
    Eval,
    Train { rate: f64, rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn dropout<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rate, rng } => x.dropout(*rate, true, &mut **rng),
        }
    }
}
