//! Full few-shot models: a shared encoder followed by the MGIMN matching
//! stack or one of the two baseline heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines;
use crate::encoder::{self, EncodedSeq, EncoderConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::matching::{self, AblationFlags, MatchingParams, SupportContext};
use crate::params::{Bound, ParamSet};
use crate::predict;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Mgimn,
    Proto,
    Matching,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mgimn" => Ok(Self::Mgimn),
            "proto" => Ok(Self::Proto),
            "matching" => Ok(Self::Matching),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mgimn => "mgimn",
            Self::Proto => "proto",
            Self::Matching => "matching",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub encoder: EncoderConfig,
    pub flags: AblationFlags,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        self.encoder.init_params(&mut params, &mut rng)?;
        if self.arch == Architecture::Mgimn {
            matching::init_params(&mut params, self.encoder.hidden, self.flags, &mut rng)?;
            predict::init_params(&mut params, self.encoder.hidden, &mut rng)?;
        }
        Ok(params)
    }

    pub fn encode<'t>(&self, seq: &TokenSeq, bound: &Bound<'t>, mode: &mut Mode<'_>) -> Result<EncodedSeq<'t>> {
        encoder::encode(seq, bound, &self.encoder, mode)
    }

    /// Log-probabilities (`1×N` each) for every query against the supports.
    pub fn forward_encoded<'t>(
        &self,
        bound: &Bound<'t>,
        supports: &[Vec<EncodedSeq<'t>>],
        queries: &[EncodedSeq<'t>],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var<'t>>> {
        match self.arch {
            Architecture::Mgimn => {
                let mp = MatchingParams::from_bound(bound, self.flags)?;
                let mut ctx = SupportContext::build(supports, mp, mode)?;
                queries
                    .iter()
                    .map(|&q| {
                        let matches = ctx.match_query(q, mode)?;
                        let classes = matches
                            .iter()
                            .map(|row| predict::class_aggregate(row))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(predict::predict(&classes, bound, mode)?.log_probs)
                    })
                    .collect()
            }
            Architecture::Proto | Architecture::Matching => {
                let pooled = supports
                    .iter()
                    .map(|class| class.iter().map(|&s| baselines::pooled(s)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                queries
                    .iter()
                    .map(|&q| {
                        let qv = baselines::pooled(q)?;
                        if self.arch == Architecture::Proto {
                            baselines::proto_forward(qv, &pooled)
                        } else {
                            baselines::matching_forward(qv, &pooled)
                        }
                    })
                    .collect()
            }
        }
    }

    /// Encodes then scores. `supports[n][k]` are token sequences.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        supports: &[Vec<&TokenSeq>],
        queries: &[&TokenSeq],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var<'t>>> {
        let enc_s = supports
            .iter()
            .map(|class| class.iter().map(|s| self.encode(s, bound, mode)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let enc_q = queries
            .iter()
            .map(|q| self.encode(q, bound, mode))
            .collect::<Result<Vec<_>>>()?;
        self.forward_encoded(bound, &enc_s, &enc_q, mode)
    }

    /// Eval-mode predictions from precomputed encodings.
    pub fn classify_encoded(&self, params: &ParamSet, supports: &[Vec<&Tensor>], queries: &[&Tensor]) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let as_seq = |t: &Tensor| EncodedSeq {
            hidden: tape.constant(t.clone()),
        };
        let s: Vec<Vec<EncodedSeq<'_>>> = supports
            .iter()
            .map(|class| class.iter().map(|t| as_seq(t)).collect())
            .collect();
        let q: Vec<EncodedSeq<'_>> = queries.iter().map(|t| as_seq(t)).collect();
        let out = self.forward_encoded(&bound, &s, &q, &mut Mode::Eval)?;
        Ok(out
            .iter()
            .map(|lp| lp.with_value(|v| predict::argmax(v.data())))
            .collect())
    }
}
