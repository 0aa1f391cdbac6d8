//! Information-state graph: entities discovered during a task, the relations
//! built among them, and the redundancy ratio that measures how much of the
//! exploration actually fed the answer.

use super::AggregateError;
use crate::backends::{BackendError, ModelBackend, ModelRequest};
use crate::model::Trajectory;
use crate::prompts::{compression_repair_messages, extraction_messages, PromptSet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub source: String,
    pub label: String,
    pub target: String,
}

/// Entities and relations of one trajectory. `effective_flags` aligns with
/// `vertices` and marks entities that contributed (directly or indirectly)
/// to answer derivation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EntityGraph {
    pub vertices: Vec<String>,
    pub relations: Vec<Relation>,
    pub effective_flags: Vec<bool>,
}

impl EntityGraph {
    pub fn total_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn effective_count(&self) -> usize {
        self.effective_flags.iter().filter(|f| **f).count()
    }

    /// Structural checks: flag alignment, unique vertices, relation
    /// endpoints inside the vertex set.
    pub fn validate(&self) -> Result<(), String> {
        if self.effective_flags.len() != self.vertices.len() {
            return Err(format!(
                "effective_flags ({}) does not align with vertices ({})",
                self.effective_flags.len(),
                self.vertices.len()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.vertices {
            if !seen.insert(v) {
                return Err(format!("duplicate vertex {v:?}"));
            }
        }
        for r in &self.relations {
            for end in [&r.source, &r.target] {
                if !seen.contains(end) {
                    return Err(format!("relation endpoint {end:?} is not a vertex"));
                }
            }
        }
        Ok(())
    }
}

/// Redundancy ratio: `1 - |V_eff| / |V_total|`, the fraction of explored
/// entities not needed for the answer. Higher means more losslessly
/// compressible.
pub fn redundancy_ratio(graph: &EntityGraph) -> Result<f64, AggregateError> {
    let total = graph.total_count();
    if total == 0 {
        return Err(AggregateError::EmptyGraph);
    }
    Ok(1.0 - graph.effective_count() as f64 / total as f64)
}

/// Backend-driven extraction of all entities a trajectory encountered, with
/// effectiveness judged against `gold_answer` when given, otherwise against
/// the trajectory's own final answer. Empty trajectories yield an empty
/// graph without a backend call. Invalid backend output is retried with a
/// repair prompt.
pub async fn extract_entity_graph(
    traj: &Trajectory,
    gold_answer: Option<&str>,
    backend: &dyn ModelBackend,
    prompts: &PromptSet,
) -> Result<EntityGraph, AggregateError> {
    if traj.steps.is_empty() {
        return Ok(EntityGraph::default());
    }
    let target = gold_answer
        .map(str::to_string)
        .or_else(|| traj.final_answer.clone())
        .unwrap_or_default();
    let original = extraction_messages(prompts, &traj.steps, traj.final_answer.as_deref(), &target);
    const MAX_REPAIRS: usize = 3;
    let mut messages = original.clone();
    for attempt in 0..=MAX_REPAIRS {
        let request = ModelRequest {
            messages: messages.clone(),
            tool_schemas: Vec::new(),
            temperature: 0.0,
            seed: 0,
            logprobs_required: false,
            max_tokens: 8192,
        };
        let resp = backend.chat_generate(request).await?;
        let content = resp.stream.content();
        let outcome = serde_json::from_str::<EntityGraph>(content.trim())
            .map_err(|e| format!("output is not a valid entity graph: {e}"))
            .and_then(|g| g.validate().map(|()| g));
        match outcome {
            Ok(graph) => return Ok(graph),
            Err(reason) if attempt < MAX_REPAIRS => {
                tracing::debug!(trajectory = %traj.id, attempt, %reason, "extraction output rejected");
                messages = compression_repair_messages(prompts, &original, &content, &reason);
            }
            Err(reason) => {
                return Err(AggregateError::Backend(BackendError::Protocol(format!(
                    "entity extraction failed after {MAX_REPAIRS} repairs: {reason}"
                ))));
            }
        }
    }
    unreachable!("extraction attempt loop always returns");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(total: usize, effective: usize) -> EntityGraph {
        EntityGraph {
            vertices: (0..total).map(|i| format!("e{i}")).collect(),
            relations: vec![],
            effective_flags: (0..total).map(|i| i < effective).collect(),
        }
    }

    #[test]
    fn redundancy_matches_definition() {
        assert_eq!(redundancy_ratio(&graph(5, 5)).unwrap(), 0.0);
        assert!((redundancy_ratio(&graph(12, 3)).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(redundancy_ratio(&graph(5, 0)).unwrap(), 1.0);
        assert_eq!(redundancy_ratio(&graph(0, 0)), Err(AggregateError::EmptyGraph));
    }

    #[test]
    fn validation_rejects_dangling_relations() {
        let mut g = graph(2, 1);
        g.relations.push(Relation { source: "e0".into(), label: "rel".into(), target: "ghost".into() });
        assert!(g.validate().is_err());
        g.relations[0].target = "e1".into();
        assert!(g.validate().is_ok());
    }

    #[test]
    fn validation_rejects_misaligned_flags() {
        let mut g = graph(3, 1);
        g.effective_flags.pop();
        assert!(g.validate().is_err());
    }
}
