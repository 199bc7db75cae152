//! Speech intelligibility enhancement for electrolaryngeal (EL) voices.
//!
//! The toolkit converts monotone, slow, partly mispronounced EL speech into
//! a typical target voice through three separately trained modules:
//!
//! * [`recognition`] — a hybrid CTC/attention encoder with a speech-type-ID
//!   head, trained in three stages, exporting bottleneck features (BNFs);
//! * [`alignment`] — a sequence-to-sequence model mapping EL-domain BNFs to
//!   typical-domain soft content units, correcting rate and phonemes;
//! * [`synthesis`] — a guided diffusion decoder rendering target-speaker
//!   mel-spectrograms from units plus a speaker embedding.
//!
//! Supporting modules provide the synthetic paired corpus ([`corpus`]),
//! deterministic signal processing ([`dsp`]), soft content units
//! ([`units`]), objective metrics ([`eval`]) and end-to-end orchestration
//! ([`pipeline`]).

pub mod ckpt;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod io;
pub mod mat;
pub mod nn;
pub mod pipeline;
pub mod recognition;
pub mod rng;
pub mod synthesis;
pub mod units;

pub mod alignment;
