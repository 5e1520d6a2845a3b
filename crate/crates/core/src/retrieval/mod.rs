//! Generative retrieval over SID token streams: an autoregressive scorer
//! interface, next-token losses, dynamic beam search, and HR@K.

mod beam;
mod eval;
mod loss;
mod markov;

use crate::catalog::SidStructure;
use crate::error::Result;

pub use beam::{dynamic_beam_search, exhaustive_ranking, BeamSchedule};
pub use eval::{build_useraction_corpus, evaluate_hr, history_context, HrReport};
pub use loss::{full_masked_loss, rec_loss, rec_loss_batch, slice_plan, sliced_loss, LabeledSequence, SlicePlan, SlicedLoss};
pub use markov::{load_markov_scorer, parse_markov_scorer, train_markov_scorer, MarkovScorer, DEFAULT_ALPHA, DEFAULT_ORDER};

/// Next-token distribution over SID tokens. The level being predicted is
/// `context.len() % m`, and the returned log-probabilities cover exactly
/// that level's band, normalized within it.
pub trait SequenceScorer: Sync {
    fn structure(&self) -> &SidStructure;

    fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>>;

    /// Query-conditioned variant for search rows. Scorers that cannot use
    /// the query fall back to the plain distribution.
    fn next_token_log_probs_with_query(&self, context: &[usize], query: Option<&str>) -> Result<Vec<f64>> {
        let _ = query;
        self.next_token_log_probs(context)
    }
}

impl<S: SequenceScorer + ?Sized> SequenceScorer for &S {
    fn structure(&self) -> &SidStructure {
        (**self).structure()
    }

    fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
        (**self).next_token_log_probs(context)
    }

    fn next_token_log_probs_with_query(&self, context: &[usize], query: Option<&str>) -> Result<Vec<f64>> {
        (**self).next_token_log_probs_with_query(context, query)
    }
}
