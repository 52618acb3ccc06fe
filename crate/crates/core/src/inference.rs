//! Stateful per-user scoring: one stored hidden state per user, carried from
//! each impression to the next.

use std::collections::HashMap;

use thiserror::Error;

use crate::datamodel::{featurize_into, FeatureError, FeatureSpec, PositionClass, UserSequence};
use crate::models::{self, HiddenState, Model, ModelError, RnnParams};
use crate::numkernel::{sigmoid, Vector};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Read-only recurrent parameters plus the last hidden state of every user
/// scored so far.
#[derive(Debug, Clone)]
pub struct ScorerState {
    params: RnnParams,
    store: HashMap<u64, HiddenState>,
    scratch: Vec<f64>,
}

impl ScorerState {
    pub fn new(params: RnnParams) -> Self {
        let scratch = vec![0.0; params.hidden_size()];
        Self {
            params,
            store: HashMap::new(),
            scratch,
        }
    }

    pub fn params(&self) -> &RnnParams {
        &self.params
    }

    /// Scores the user's next impression and replaces their stored state.
    pub fn score_next(&mut self, user_id: u64, x: &[f64]) -> Result<f64, ModelError> {
        if x.len() != self.params.input_width() {
            return Err(ModelError::InputWidth {
                expected: self.params.input_width(),
                got: x.len(),
            });
        }
        let hsz = self.params.hidden_size();
        let state = self
            .store
            .entry(user_id)
            .or_insert_with(|| HiddenState::zeros(hsz));
        let prob = models::rnn_step_into(&self.params, x, state.as_slice(), &mut self.scratch);
        state.0.as_mut_slice().copy_from_slice(&self.scratch);
        Ok(prob)
    }

    pub fn state(&self, user_id: u64) -> Option<&HiddenState> {
        self.store.get(&user_id)
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Forgets one user; unknown users are ignored.
    pub fn reset(&mut self, user_id: u64) {
        self.store.remove(&user_id);
    }

    pub fn reset_all(&mut self) {
        self.store.clear();
    }
}

/// Recurrent step from the zero state; nothing is stored.
pub fn score_ablated(params: &RnnParams, x: &[f64]) -> Result<f64, ModelError> {
    if x.len() != params.input_width() {
        return Err(ModelError::InputWidth {
            expected: params.input_width(),
            got: x.len(),
        });
    }
    let mut h = vec![0.0; params.hidden_size()];
    let zero = vec![0.0; params.hidden_size()];
    Ok(models::rnn_step_into(params, x, &zero, &mut h))
}

/// How a corpus is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreOptions {
    /// Score the recurrent model with its state forced to zero.
    pub ablate_recurrent: bool,
    /// Leading impressions per user that are fed through the model but left
    /// out of the output. Users with no more than this many impressions are
    /// skipped entirely.
    pub accumulation: usize,
}

/// Scored impressions in corpus order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredCorpus {
    pub preds: Vec<f64>,
    pub labels: Vec<bool>,
    pub positions: Vec<PositionClass>,
}

impl ScoredCorpus {
    pub fn position_labels(&self) -> Vec<String> {
        self.positions.iter().map(|p| p.to_string()).collect()
    }
}

/// Scores every user sequence in order with the given model.
pub fn score_sequences(
    model: &Model,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    opts: ScoreOptions,
) -> Result<ScoredCorpus, InferenceError> {
    if model.input_width() != spec.width() {
        return Err(ModelError::InputWidth {
            expected: model.input_width(),
            got: spec.width(),
        }
        .into());
    }
    let mut x = vec![0.0; spec.width()];
    let mut hidden = vec![0.0; model.hidden_size()];
    let mut scorer = match model {
        Model::Rnn(p) if !opts.ablate_recurrent => Some(ScorerState::new(p.clone())),
        _ => None,
    };
    let mut out = ScoredCorpus::default();
    for seq in sequences {
        if seq.len() <= opts.accumulation {
            continue;
        }
        for (k, (rec, pred)) in seq.with_predecessors().enumerate() {
            featurize_into(spec, rec, pred, &mut x)?;
            let p = match (model, scorer.as_mut()) {
                (_, Some(s)) => s.score_next(rec.user_id, &x)?,
                (Model::Rnn(p), None) => score_ablated(p, &x)?,
                (Model::Nn(p), None) => models::nn_forward_into(p, &x, &mut hidden),
                (Model::Lr(p), None) => sigmoid(models::lr_logit(p, &x)),
            };
            if k >= opts.accumulation {
                out.preds.push(p);
                out.labels.push(rec.clicked);
                out.positions.push(rec.position.class());
            }
        }
    }
    Ok(out)
}

/// Predictions and labels for a whole corpus, stateful unless `ablate`.
pub fn score_corpus(
    model: &Model,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    ablate: bool,
) -> Result<(Vec<f64>, Vec<bool>), InferenceError> {
    let scored = score_sequences(
        model,
        spec,
        sequences,
        ScoreOptions {
            ablate_recurrent: ablate,
            accumulation: 0,
        },
    )?;
    Ok((scored.preds, scored.labels))
}

/// Hidden state after a user's whole sequence, from the offline recursion.
pub fn final_state(params: &RnnParams, spec: &FeatureSpec, seq: &UserSequence) -> Result<HiddenState, InferenceError> {
    let mut h = vec![0.0; params.hidden_size()];
    let mut next = h.clone();
    let mut x = vec![0.0; spec.width()];
    for (rec, pred) in seq.with_predecessors() {
        featurize_into(spec, rec, pred, &mut x)?;
        models::rnn_step_into(params, &x, &h, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    Ok(HiddenState(Vector::from_vec(h)))
}
