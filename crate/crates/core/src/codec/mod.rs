//! GOP planning, the closed-loop encoder and decoder, the `BPDV`
//! container, the weight bundle and the staged training procedure.

mod bitstream;
mod models;
mod pipeline;
mod plan;
mod train;

pub use bitstream::{
    Bitstream, EntropyMode, FrameRecord, Header, FLAG_NO_BIPRED_NET, FLAG_NO_FLOW_REFINE, FLAG_NO_TEMPORAL_SKIP,
    HEADER_BYTES, MAGIC, RECORD_OVERHEAD, VERSION,
};
pub use models::{
    bundle_prefix, coder_prefix, init_models, predict_prefix, refine_prefix, ModelConfig, Models, ENTROPY_PLAIN_PREFIX,
    ENTROPY_SKIP_PREFIX, INTRA_PREFIX,
};
pub use pipeline::{decode_video, encode_video, CodedFrame, EncodeOptions, EncodeOutput};
pub use plan::{padded_length, plan_gop, sequence_order, FrameType, GopPlan, GopStep, SequenceStep, GOP_SIZE};
pub use train::*;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var};

/// Weights of the autoencoder, prediction and flow losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub m_a: f64,
    pub m_p: f64,
    pub m_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { m_a: 1.0, m_p: 1.0, m_f: 0.1 }
    }
}

impl LossWeights {
    pub fn new(m_a: f64, m_p: f64, m_f: f64) -> Result<Self> {
        if [m_a, m_p, m_f].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        Ok(LossWeights { m_a, m_p, m_f })
    }
}

/// `m_a l_a + m_p l_p + m_f l_f`.
pub fn total_loss(l_a: f64, l_p: f64, l_f: f64, w: LossWeights) -> f64 {
    w.m_a * l_a + w.m_p * l_p + w.m_f * l_f
}

/// Tape form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_var<'t, T: Scalar>(
    l_a: Option<Var<'t, T>>,
    l_p: Option<Var<'t, T>>,
    l_f: Option<Var<'t, T>>,
    w: LossWeights,
) -> Result<Var<'t, T>> {
    let terms: Vec<Var<'t, T>> = [(l_a, w.m_a), (l_p, w.m_p), (l_f, w.m_f)]
        .into_iter()
        .filter_map(|(v, m)| v.map(|v| v.scale(m)))
        .collect();
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::InvalidArgument("total loss needs at least one term".into()))?;
    it.try_fold(first, |acc, t| acc.add(t))
}
