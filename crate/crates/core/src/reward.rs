//! Token-level reward `R*` and its expectation over forward rollouts, `IR`.
//!
//! `R*` is the dot product of a per-token importance vector (how much each
//! output token carries the user's intent) with the backend's per-token
//! confidence, optionally divided by the token count.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatBackend, ChatMessage, FixtureResponse};
use crate::cid::IntentSchema;
use crate::clarifier::{final_context, ClarifierError, SessionState, Trajectory};
use crate::prompts::PromptTemplates;
use crate::sampler::{
    enumerate_forward_conversations, run_rollout, with_pool, RolloutRecord, SamplerConfig, SamplerError,
    SimulatorProfile,
};
use crate::scalar::Scalar;
use crate::text::{strip_token, whitespace_spans};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreVector<S = f64> {
    pub tokens: Vec<String>,
    pub scores: Vec<S>,
}

impl<S: Scalar> TokenScoreVector<S> {
    pub fn new(tokens: Vec<String>, scores: Vec<S>) -> Result<Self, RewardError> {
        if tokens.len() != scores.len() {
            return Err(RewardError::LengthMismatch(tokens.len(), scores.len()));
        }
        if scores.iter().any(|s| *s < S::zero() || !s.to_real().is_finite()) {
            return Err(RewardError::InvalidScore("scores must be finite and non-negative".into()));
        }
        Ok(TokenScoreVector { tokens, scores })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    #[default]
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace<S = f64> {
    pub r_imp: TokenScoreVector<S>,
    pub r_con: TokenScoreVector<S>,
    pub r_star: S,
    pub normalization: Normalization,
    pub provider_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Exhaustive,
    MonteCarlo { n: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSample<S = f64> {
    pub rollout: String,
    pub r_star: S,
    pub weight: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentAwareReward<S = f64> {
    pub value: S,
    pub history_ref: String,
    pub samples: Vec<RewardSample<S>>,
    pub estimator: Estimator,
    pub provider_id: String,
    pub normalization: Normalization,
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error("cannot align provider tokens with backend tokens: {0}")]
    Alignment(String),
    #[error("saliency provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Clarifier(#[from] ClarifierError),
}

/// Everything a saliency provider may look at.
#[derive(Clone, Debug)]
pub struct SaliencyInput<'a> {
    pub instruction: &'a str,
    pub output: &'a str,
    /// Values of resolved elements.
    pub values: Vec<&'a str>,
    /// Canonical names of resolved elements.
    pub names: Vec<&'a str>,
}

impl<'a> SaliencyInput<'a> {
    pub fn new(schema: &'a IntentSchema, trajectory: &'a Trajectory, output: &'a str) -> Self {
        SaliencyInput {
            instruction: &trajectory.instruction.text,
            output,
            values: trajectory.resolved.values().map(String::as_str).collect(),
            names: trajectory
                .resolved
                .keys()
                .filter_map(|id| schema.element(id))
                .map(|e| e.name.as_str())
                .collect(),
        }
    }
}

/// Provider scores over the provider's own tokenization of the output, as
/// byte spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub spans: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

pub trait SaliencyProvider: Send + Sync {
    fn id(&self) -> String;
    fn importance(&self, input: &SaliencyInput<'_>) -> Result<SpanScores, RewardError>;
}

/// Scores a whitespace token 1 when, case-folded and stripped of edge
/// punctuation, it equals a token of a resolved value or of a resolved
/// element's name.
#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalSaliency;

impl SaliencyProvider for LexicalSaliency {
    fn id(&self) -> String {
        "lexical-v1".into()
    }

    fn importance(&self, input: &SaliencyInput<'_>) -> Result<SpanScores, RewardError> {
        let anchors: BTreeSet<String> = input
            .values
            .iter()
            .chain(&input.names)
            .flat_map(|s| s.split_whitespace().map(strip_token))
            .filter(|t| !t.is_empty())
            .collect();
        let spans = whitespace_spans(input.output);
        let scores = spans
            .iter()
            .map(|&(a, b)| {
                let t = strip_token(&input.output[a..b]);
                if !t.is_empty() && anchors.contains(&t) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(SpanScores { spans, scores })
    }
}

/// Replays importance vectors recorded from a gradient-based NLI model.
/// Fixtures are keyed by the exact output text; scores are over its
/// whitespace tokens.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RecordedSaliency {
    pub id: String,
    pub fixtures: std::collections::BTreeMap<String, Vec<f64>>,
}

impl RecordedSaliency {
    pub fn load(path: &std::path::Path) -> Result<Self, RewardError> {
        let text = std::fs::read_to_string(path).map_err(|e| RewardError::Provider(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RewardError::Provider(format!("{}: {e}", path.display())))
    }
}

impl SaliencyProvider for RecordedSaliency {
    fn id(&self) -> String {
        if self.id.is_empty() {
            "nli-recorded".into()
        } else {
            self.id.clone()
        }
    }

    fn importance(&self, input: &SaliencyInput<'_>) -> Result<SpanScores, RewardError> {
        let scores = self
            .fixtures
            .get(input.output)
            .ok_or_else(|| RewardError::Provider(format!("no recorded saliency for output {:?}", input.output)))?;
        let spans = whitespace_spans(input.output);
        if spans.len() != scores.len() {
            return Err(RewardError::Alignment(format!(
                "recorded {} scores for {} tokens",
                scores.len(),
                spans.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(RewardError::InvalidScore("recorded saliency must be finite and non-negative".into()));
        }
        Ok(SpanScores {
            spans,
            scores: scores.clone(),
        })
    }
}

/// Byte spans of `tokens` found in order in `text`. Leading whitespace a
/// tokenizer folds into a token is tolerated.
pub fn locate_tokens(text: &str, tokens: &[String]) -> Result<Vec<(usize, usize)>, RewardError> {
    let mut at = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        let needle = t.trim();
        if needle.is_empty() {
            out.push((at, at));
            continue;
        }
        let start = text[at..]
            .find(needle)
            .map(|i| i + at)
            .ok_or_else(|| RewardError::Alignment(format!("token {t:?} not found after byte {at}")))?;
        at = start + needle.len();
        out.push((start, at));
    }
    Ok(out)
}

/// Move provider scores onto backend tokens. Each provider token's score is
/// split across the backend tokens it overlaps, in proportion to the
/// overlapping byte count.
pub fn align_scores(provider: &SpanScores, target: &[(usize, usize)]) -> Vec<f64> {
    let mut out = vec![0.0; target.len()];
    for (&(a, b), &s) in provider.spans.iter().zip(&provider.scores) {
        if s == 0.0 || b <= a {
            continue;
        }
        let len = (b - a) as f64;
        for (slot, &(c, d)) in out.iter_mut().zip(target) {
            let overlap = b.min(d).saturating_sub(a.max(c));
            if overlap > 0 {
                *slot += s * overlap as f64 / len;
            }
        }
    }
    out
}

/// `P(y_i | x, t, y_<i)` from the backend.
pub fn confidence_scores<S: Scalar>(
    schema: &IntentSchema,
    trajectory: &Trajectory,
    y: &str,
    backend: &dyn ChatBackend,
    templates: &PromptTemplates,
) -> Result<TokenScoreVector<S>, RewardError> {
    if y.is_empty() {
        return Ok(TokenScoreVector {
            tokens: Vec::new(),
            scores: Vec::new(),
        });
    }
    let context: Vec<ChatMessage> = final_context(schema, trajectory, templates);
    let scored = backend.score_continuation(&context, y)?.validate()?;
    TokenScoreVector::new(scored.tokens, scored.probs.into_iter().map(S::from_real).collect())
}

/// Provider importance re-expressed on `tokens`, the backend tokenization
/// of `y`.
pub fn importance_scores<S: Scalar>(
    schema: &IntentSchema,
    trajectory: &Trajectory,
    y: &str,
    tokens: &[String],
    provider: &dyn SaliencyProvider,
) -> Result<TokenScoreVector<S>, RewardError> {
    let raw = provider.importance(&SaliencyInput::new(schema, trajectory, y))?;
    if raw.spans.len() != raw.scores.len() {
        return Err(RewardError::LengthMismatch(raw.spans.len(), raw.scores.len()));
    }
    let target = locate_tokens(y, tokens)?;
    let aligned = if raw.spans == target {
        raw.scores
    } else {
        align_scores(&raw, &target)
    };
    TokenScoreVector::new(tokens.to_vec(), aligned.into_iter().map(S::from_real).collect())
}

pub fn token_level_reward<S: Scalar>(
    imp: &TokenScoreVector<S>,
    con: &TokenScoreVector<S>,
    normalization: Normalization,
) -> Result<S, RewardError> {
    if imp.len() != con.len() {
        return Err(RewardError::LengthMismatch(imp.len(), con.len()));
    }
    let dot = imp
        .scores
        .iter()
        .zip(&con.scores)
        .fold(S::zero(), |acc, (a, b)| acc + *a * *b);
    Ok(match normalization {
        Normalization::Raw => dot,
        Normalization::PerToken if imp.is_empty() => S::zero(),
        Normalization::PerToken => dot / S::from_count(imp.len()),
    })
}

/// Full `R*` computation for a finished trajectory.
pub fn reward_trace<S: Scalar>(
    schema: &IntentSchema,
    trajectory: &Trajectory,
    backend: &dyn ChatBackend,
    provider: &dyn SaliencyProvider,
    templates: &PromptTemplates,
    normalization: Normalization,
) -> Result<RewardTrace<S>, RewardError> {
    let y = trajectory.final_output.as_deref().unwrap_or("");
    let r_con = confidence_scores::<S>(schema, trajectory, y, backend, templates)?;
    let r_imp = importance_scores::<S>(schema, trajectory, y, &r_con.tokens, provider)?;
    let r_star = token_level_reward(&r_imp, &r_con, normalization)?;
    Ok(RewardTrace {
        r_imp,
        r_con,
        r_star,
        normalization,
        provider_id: provider.id(),
    })
}

/// Expected `R*` over forward conversations from a session waiting on
/// table `m_j`.
pub fn intent_aware_reward<S: Scalar>(
    prefix: &SessionState,
    profile: &SimulatorProfile,
    cfg: &SamplerConfig,
    backend: &dyn ChatBackend,
    provider: &dyn SaliencyProvider,
    normalization: Normalization,
) -> Result<IntentAwareReward<S>, RewardError> {
    let turn = prefix
        .pending
        .as_ref()
        .map(|t| t.turn_index)
        .ok_or(SamplerError::NoPendingTable)?;
    profile.validate(&prefix.schema)?;
    let score = |r: &RolloutRecord| -> Result<S, RewardError> {
        Ok(reward_trace::<S>(&prefix.schema, &r.trajectory, backend, provider, &prefix.config.templates, normalization)?.r_star)
    };

    let (samples, estimator) = if cfg.exhaustive {
        let leaves = enumerate_forward_conversations(prefix, profile, backend, cfg)?;
        let samples = leaves
            .iter()
            .map(|r| {
                Ok(RewardSample {
                    rollout: r.id.clone(),
                    r_star: score(r)?,
                    weight: r.weight::<S>(),
                })
            })
            .collect::<Result<Vec<_>, RewardError>>()?;
        (samples, Estimator::Exhaustive)
    } else {
        if cfg.n == 0 {
            return Err(SamplerError::ZeroRollouts.into());
        }
        let one = |i: usize| -> Result<RewardSample<S>, RewardError> {
            let r = run_rollout(prefix, profile, backend, cfg, i)?;
            Ok(RewardSample {
                rollout: r.id.clone(),
                r_star: score(&r)?,
                weight: S::one(),
            })
        };
        let samples = with_pool(cfg.workers, || {
            (0..cfg.n)
                .into_par_iter()
                .map(|i| {
                    one(i).or_else(|e| {
                        log::warn!("rollout {i} failed ({e}); retrying once");
                        one(i)
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })??;
        (
            samples,
            Estimator::MonteCarlo {
                n: cfg.n,
                seed: cfg.master_seed,
            },
        )
    };

    // fixed summation order keeps float results bit-stable
    let value = match estimator {
        Estimator::Exhaustive => samples.iter().fold(S::zero(), |acc, s| acc + s.weight * s.r_star),
        Estimator::MonteCarlo { .. } => S::mean(&samples.iter().map(|s| s.r_star).collect::<Vec<_>>()),
    };
    Ok(IntentAwareReward {
        value,
        history_ref: format!("{}#j{}", prefix.id, turn),
        samples,
        estimator,
        provider_id: provider.id(),
        normalization,
    })
}

/// Score-vector fixture for a stub backend, keyed the way the stub looks it
/// up.
pub fn score_fixture(
    schema: &IntentSchema,
    trajectory: &Trajectory,
    y: &str,
    probs: Vec<f64>,
    templates: &PromptTemplates,
) -> (String, FixtureResponse) {
    let mut messages = final_context(schema, trajectory, templates);
    messages.push(ChatMessage::assistant(y));
    let fp = crate::backend::fingerprint(crate::backend::Capability::Score, &messages, None);
    let tokens = y.split_whitespace().map(str::to_owned).collect();
    (fp, FixtureResponse::Scores { tokens, probs })
}
