//! Scoring: staging accuracy, judge-based reasoning quality and medication
//! precision, similarity F1, and the pairwise win-rate matrix.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::backend::{
    parse_structured, BackendError, FieldKind, FieldSpec, ModelBackend, ModelRequest,
    StructSchema,
};
use crate::case::Language;
use crate::prompts::{PromptError, PromptLibrary};
use crate::staging::{MCategory, NCategory, TCategory};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and gold lists have different lengths ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("per-case score vectors are not aligned on the same case set")]
    UnalignedCases,
    #[error("judge backend error: {0}")]
    Backend(#[from] BackendError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
}

/// Exact and per-component staging accuracy, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagingAccuracy {
    pub exact: f64,
    pub t: f64,
    pub n: f64,
    pub m: f64,
}

/// A prediction counts as correct only when T, N and M all match.
pub fn score_staging_accuracy(
    preds: &[(TCategory, NCategory, MCategory)],
    golds: &[(TCategory, NCategory, MCategory)],
) -> Result<StagingAccuracy, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let n = preds.len() as f64;
    if preds.is_empty() {
        return Ok(StagingAccuracy {
            exact: 0.0,
            t: 0.0,
            n: 0.0,
            m: 0.0,
        });
    }
    let mut exact = 0usize;
    let mut t_hits = 0usize;
    let mut n_hits = 0usize;
    let mut m_hits = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        if p == g {
            exact += 1;
        }
        t_hits += usize::from(p.0 == g.0);
        n_hits += usize::from(p.1 == g.1);
        m_hits += usize::from(p.2 == g.2);
    }
    Ok(StagingAccuracy {
        exact: 100.0 * exact as f64 / n,
        t: 100.0 * t_hits as f64 / n,
        n: 100.0 * n_hits as f64 / n,
        m: 100.0 * m_hits as f64 / n,
    })
}

fn rq_schema() -> StructSchema {
    StructSchema::new(vec![
        FieldSpec::required("t_score", FieldKind::Integer),
        FieldSpec::required("n_score", FieldKind::Integer),
        FieldSpec::required("m_score", FieldKind::Integer),
        FieldSpec::required("synthesis_score", FieldKind::Integer),
    ])
}

fn judge_once_rq(text: &str) -> Option<f64> {
    let value = parse_structured(text, &rq_schema()).ok()?;
    let mut sum = 0i64;
    for field in ["t_score", "n_score", "m_score", "synthesis_score"] {
        let v = value[field].as_i64()?;
        if !(1..=5).contains(&v) {
            return None;
        }
        sum += v;
    }
    Some(100.0 * (sum as f64 / 4.0) / 5.0)
}

/// Reasoning quality: the judge scores four components (T, N, M, synthesis)
/// on 1-5; RQ is the mean rescaled to [20, 100]. One retry on a malformed
/// reply, then the case is left unscored.
pub fn judge_reasoning_quality(
    prediction: &str,
    reference: &str,
    judge: &dyn ModelBackend,
    prompts: &PromptLibrary,
    language: Language,
) -> Result<Option<f64>, MetricsError> {
    let prompt = prompts.render(
        "judge_rq",
        language,
        &[("prediction", prediction), ("reference", reference)],
    )?;
    for _ in 0..2 {
        let response = judge.complete(&ModelRequest::simple("judge-rq", prompt.clone()))?;
        if let Some(score) = judge_once_rq(&response.text) {
            return Ok(Some(score));
        }
    }
    Ok(None)
}

fn precision_schema() -> StructSchema {
    StructSchema::new(vec![
        FieldSpec::required("predicted_medications", FieldKind::Array),
        FieldSpec::required("matched_pairs", FieldKind::Array),
    ])
}

fn judge_once_precision(text: &str) -> Option<f64> {
    let value = parse_structured(text, &precision_schema()).ok()?;
    let pred = value["predicted_medications"].as_array()?.len();
    let matched = value["matched_pairs"].as_array()?.len();
    if pred == 0 {
        return Some(0.0);
    }
    Some(100.0 * matched.min(pred) as f64 / pred as f64)
}

/// Medication precision: the judge lists predicted and reference medications
/// and the matched pairs (normalizing brand names, salt forms and
/// abbreviations); precision is matched over predicted, and an empty
/// prediction scores zero.
pub fn judge_precision(
    pred_plan: &str,
    gold_plan: &str,
    judge: &dyn ModelBackend,
    prompts: &PromptLibrary,
    language: Language,
) -> Result<Option<f64>, MetricsError> {
    let prompt = prompts.render(
        "judge_precision",
        language,
        &[("prediction", pred_plan), ("reference", gold_plan)],
    )?;
    for _ in 0..2 {
        let response = judge.complete(&ModelRequest::simple("judge-precision", prompt.clone()))?;
        if let Some(score) = judge_once_precision(&response.text) {
            return Ok(Some(score));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Similarity F1
// ---------------------------------------------------------------------------

/// Token embedding contract. The shipped provider is a deterministic hashed
/// character-trigram embedding; a real sentence-embedding model plugs in
/// behind the same trait.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, token: &str) -> Vec<f32>;
}

#[derive(Debug, Clone)]
pub struct HashedNgramEmbedding {
    dim: usize,
}

impl Default for HashedNgramEmbedding {
    fn default() -> Self {
        HashedNgramEmbedding { dim: 128 }
    }
}

impl EmbeddingProvider for HashedNgramEmbedding {
    fn embed(&self, token: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let padded: Vec<char> = std::iter::once('^')
            .chain(token.chars())
            .chain(std::iter::once('$'))
            .collect();
        for window in padded.windows(3.min(padded.len())) {
            let mut hash = 1469598103934665603u64;
            for c in window {
                hash ^= *c as u64;
                hash = hash.wrapping_mul(1099511628211);
            }
            v[(hash % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            word.push(c.to_ascii_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if ('\u{4e00}'..='\u{9fff}').contains(&c) {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum()
}

/// Greedy token-level embedding similarity: precision is the mean best match
/// of each predicted token against the reference tokens, recall the reverse,
/// and the score their harmonic mean on a 0-100 scale.
pub fn embedding_token_f1(pred: &str, gold: &str, provider: &dyn EmbeddingProvider) -> f64 {
    let pred_tokens = tokenize(pred);
    let gold_tokens = tokenize(gold);
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return 0.0;
    }
    let pred_vecs: Vec<Vec<f32>> = pred_tokens.iter().map(|t| provider.embed(t)).collect();
    let gold_vecs: Vec<Vec<f32>> = gold_tokens.iter().map(|t| provider.embed(t)).collect();
    let best = |from: &[Vec<f32>], to: &[Vec<f32>]| -> f64 {
        from.iter()
            .map(|v| {
                to.iter()
                    .map(|w| cosine(v, w))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&pred_vecs, &gold_vecs);
    let r = best(&gold_vecs, &pred_vecs);
    if p + r <= 0.0 {
        return 0.0;
    }
    100.0 * 2.0 * p * r / (p + r)
}

/// Which scorer backs the similarity column; the report records the choice.
pub enum SimilarityScorer<'a> {
    EmbeddingTokenF1(&'a dyn EmbeddingProvider),
    Judge {
        backend: &'a dyn ModelBackend,
        prompts: &'a PromptLibrary,
        language: Language,
    },
}

impl SimilarityScorer<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            SimilarityScorer::EmbeddingTokenF1(_) => "embedding-token-f1",
            SimilarityScorer::Judge { .. } => "judge-similarity-x20",
        }
    }
}

fn similarity_schema() -> StructSchema {
    StructSchema::new(vec![FieldSpec::required("score", FieldKind::Integer)])
}

/// Similarity between predicted and reference reasoning, in [0, 100].
pub fn score_similarity_f1(
    pred_reasoning: &str,
    gold_reasoning: &str,
    scorer: &SimilarityScorer<'_>,
) -> Result<Option<f64>, MetricsError> {
    match scorer {
        SimilarityScorer::EmbeddingTokenF1(provider) => Ok(Some(embedding_token_f1(
            pred_reasoning,
            gold_reasoning,
            *provider,
        ))),
        SimilarityScorer::Judge {
            backend,
            prompts,
            language,
        } => {
            let prompt = prompts.render(
                "judge_similarity",
                *language,
                &[("prediction", pred_reasoning), ("reference", gold_reasoning)],
            )?;
            for _ in 0..2 {
                let response =
                    backend.complete(&ModelRequest::simple("judge-similarity", prompt.clone()))?;
                if let Ok(value) = parse_structured(&response.text, &similarity_schema()) {
                    if let Some(score) = value["score"].as_i64() {
                        if (0..=5).contains(&score) {
                            return Ok(Some(score as f64 * 20.0));
                        }
                    }
                }
            }
            Ok(None)
        }
    }
}

// ---------------------------------------------------------------------------
// Win-rate matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct WinRateMatrix {
    pub names: Vec<String>,
    /// `values[a][b]` is the win rate of `names[a]` over `names[b]`.
    pub values: Vec<Vec<f64>>,
}

/// Pairwise win rates over aligned per-case score vectors: wins plus half of
/// ties, over the shared case count. The diagonal is one half by convention,
/// so `W[a][b] + W[b][a] = 1` for every pair.
pub fn win_rate_matrix(
    per_case_scores: &BTreeMap<String, Vec<f64>>,
) -> Result<WinRateMatrix, MetricsError> {
    let names: Vec<String> = per_case_scores.keys().cloned().collect();
    let mut len: Option<usize> = None;
    for v in per_case_scores.values() {
        match len {
            None => len = Some(v.len()),
            Some(l) if l == v.len() => {}
            _ => return Err(MetricsError::UnalignedCases),
        }
    }
    let n = len.unwrap_or(0);
    let mut values = vec![vec![0.5f64; names.len()]; names.len()];
    for (i, a) in names.iter().enumerate() {
        for (j, b) in names.iter().enumerate() {
            if i == j {
                continue;
            }
            if n == 0 {
                values[i][j] = 0.5;
                continue;
            }
            let va = &per_case_scores[a];
            let vb = &per_case_scores[b];
            let mut score = 0.0;
            for (x, y) in va.iter().zip(vb) {
                if x > y {
                    score += 1.0;
                } else if x == y {
                    score += 0.5;
                }
            }
            values[i][j] = score / n as f64;
        }
    }
    Ok(WinRateMatrix { names, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{scripted_backend, ScriptRule};

    #[test]
    fn staging_accuracy_counts_components_independently() {
        use MCategory as M;
        use NCategory as N;
        use TCategory as T;
        let gold = vec![(T::T1a, N::N0, M::M0); 4];
        let preds = vec![
            (T::T1a, N::N0, M::M0),
            (T::T1a, N::N1, M::M0),
            (T::T1a, N::N0, M::M0),
            (T::T1a, N::N0, M::M0),
        ];
        let acc = score_staging_accuracy(&preds, &gold).unwrap();
        assert!((acc.exact - 75.0).abs() < 1e-9);
        assert!((acc.t - 100.0).abs() < 1e-9);
        assert!((acc.n - 75.0).abs() < 1e-9);
        assert!((acc.m - 100.0).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        use MCategory as M;
        use NCategory as N;
        use TCategory as T;
        let err =
            score_staging_accuracy(&[(T::T1a, N::N0, M::M0)], &[]).unwrap_err();
        assert!(matches!(err, MetricsError::LengthMismatch { .. }));
    }

    fn rq_reply(scores: [i64; 4]) -> String {
        serde_json::json!({
            "t_score": scores[0], "n_score": scores[1],
            "m_score": scores[2], "synthesis_score": scores[3],
            "justification": "fixture"
        })
        .to_string()
    }

    #[test]
    fn rq_scaling_floor_and_ceiling() {
        let judge = scripted_backend(vec![
            ScriptRule::new("judge-rq", rq_reply([1, 1, 1, 1])),
            ScriptRule::new("judge-rq", rq_reply([5, 5, 5, 5])),
            ScriptRule::new("judge-rq", rq_reply([4, 5, 4, 5])),
        ]);
        let prompts = PromptLibrary::embedded();
        let rq = |p: &str| {
            judge_reasoning_quality(p, "ref", &judge, &prompts, Language::En)
                .unwrap()
                .unwrap()
        };
        assert!((rq("a") - 20.0).abs() < 1e-9);
        assert!((rq("b") - 100.0).abs() < 1e-9);
        assert!((rq("c") - 90.0).abs() < 1e-9);
    }

    #[test]
    fn rq_retries_once_then_unscored() {
        let judge = scripted_backend(vec![
            ScriptRule::new("judge-rq", "not json"),
            ScriptRule::new("judge-rq", rq_reply([3, 3, 3, 3])),
            ScriptRule::new("judge-rq", "still not json").sticky(),
        ]);
        let prompts = PromptLibrary::embedded();
        let first = judge_reasoning_quality("a", "r", &judge, &prompts, Language::En).unwrap();
        assert_eq!(first, Some(60.0));
        let second = judge_reasoning_quality("b", "r", &judge, &prompts, Language::En).unwrap();
        assert_eq!(second, None);
    }

    fn precision_reply(pred: &[&str], matched: usize) -> String {
        serde_json::json!({
            "predicted_medications": pred,
            "reference_medications": ["A", "B", "D"],
            "matched_pairs": (0..matched).map(|i| vec![format!("p{i}"), format!("g{i}")]).collect::<Vec<_>>(),
        })
        .to_string()
    }

    #[test]
    fn precision_is_matched_over_predicted() {
        let judge = scripted_backend(vec![
            ScriptRule::new("judge-precision", precision_reply(&["A", "B", "C"], 2)),
            ScriptRule::new("judge-precision", precision_reply(&[], 0)),
            ScriptRule::new("judge-precision", precision_reply(&["A", "B"], 2)),
        ]);
        let prompts = PromptLibrary::embedded();
        let p = |x: &str| {
            judge_precision(x, "gold", &judge, &prompts, Language::En)
                .unwrap()
                .unwrap()
        };
        assert!((p("a") - 200.0 / 3.0).abs() < 1e-9);
        assert!((p("b") - 0.0).abs() < 1e-9);
        assert!((p("c") - 100.0).abs() < 1e-9);
    }

    #[test]
    fn identical_texts_reach_self_similarity_ceiling() {
        let provider = HashedNgramEmbedding::default();
        let text = "adjuvant osimertinib for three years 术后辅助治疗";
        let score = embedding_token_f1(text, text, &provider);
        assert!((score - 100.0).abs() < 1e-3, "got {score}");
        let other = embedding_token_f1(text, "совершенно unrelated words here", &provider);
        assert!(other < score);
    }

    #[test]
    fn judge_similarity_scales_by_twenty() {
        let judge = scripted_backend(vec![
            ScriptRule::new("judge-similarity", r#"{"score": 4, "justification": "x"}"#),
            ScriptRule::new("judge-similarity", r#"{"score": 0, "justification": "x"}"#),
        ]);
        let prompts = PromptLibrary::embedded();
        let scorer = SimilarityScorer::Judge {
            backend: &judge,
            prompts: &prompts,
            language: Language::En,
        };
        assert_eq!(
            score_similarity_f1("a", "b", &scorer).unwrap(),
            Some(80.0)
        );
        assert_eq!(score_similarity_f1("a", "b", &scorer).unwrap(), Some(0.0));
    }

    #[test]
    fn win_rate_complementarity_and_ties() {
        let mut scores = BTreeMap::new();
        scores.insert("a".to_string(), vec![1.0, 2.0, 3.0]);
        scores.insert("b".to_string(), vec![0.0, 2.0, 1.0]);
        scores.insert("c".to_string(), vec![1.0, 2.0, 3.0]);
        let w = win_rate_matrix(&scores).unwrap();
        let idx = |n: &str| w.names.iter().position(|x| x == n).unwrap();
        let (a, b, c) = (idx("a"), idx("b"), idx("c"));
        assert!((w.values[a][b] - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-9);
        for i in [a, b, c] {
            assert_eq!(w.values[i][i], 0.5);
            for j in [a, b, c] {
                if i != j {
                    assert!((w.values[i][j] + w.values[j][i] - 1.0).abs() < 1e-9);
                }
            }
        }
        // All ties between a and c.
        assert!((w.values[a][c] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn unaligned_vectors_error() {
        let mut scores = BTreeMap::new();
        scores.insert("a".to_string(), vec![1.0]);
        scores.insert("b".to_string(), vec![1.0, 2.0]);
        assert!(matches!(
            win_rate_matrix(&scores),
            Err(MetricsError::UnalignedCases)
        ));
    }

    #[test]
    fn single_model_matrix_is_half() {
        let mut scores = BTreeMap::new();
        scores.insert("only".to_string(), vec![1.0, 2.0]);
        let w = win_rate_matrix(&scores).unwrap();
        assert_eq!(w.values, vec![vec![0.5]]);
    }
}
