//! DAG task plans.
//!
//! A plan is a value: every update returns a new plan and leaves the
//! original untouched on error. The answered set is kept downward-closed
//! in dependency order.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Edge, TaskAnswerEntry, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    /// Target of the most recent tool call. Counts as unanswered everywhere.
    Active,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub task_id: String,
    pub description: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default)]
    pub evidence: Vec<String>,
}

impl TaskNode {
    pub fn is_answered(&self) -> bool {
        self.status == TaskStatus::Answered
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagPlan {
    pub plan_id: u64,
    /// Nodes in declaration order.
    pub tasks: Vec<TaskNode>,
    pub edges: Vec<Edge>,
}

/// An answer removed from the plan by a revisit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedAnswer {
    pub task_id: String,
    pub old_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("plan must declare at least one task")]
    EmptyPlan,
    #[error("task id {0:?} is declared more than once")]
    DuplicateTaskId(String),
    #[error("edge ({from:?}, {to:?}) names an undeclared task")]
    UnknownEdgeEndpoint { from: String, to: String },
    #[error("dependency edges form a cycle through {0:?}")]
    CyclicPlan(Vec<String>),
    #[error("task {0:?} is not in the current plan")]
    UnknownTask(String),
    #[error("task {task:?} cannot be answered yet; unanswered dependencies: {missing:?}")]
    DependencyUnmet { task: String, missing: Vec<String> },
    #[error("task {0:?} is already answered; use revisit_task to re-open it")]
    AlreadyAnswered(String),
    #[error("task {0:?} has no answer to revisit")]
    NotAnswered(String),
}

impl DagPlan {
    /// Validates tasks and edges into a fresh plan with every node pending.
    pub fn build(tasks: &[TaskSpec], edges: &[Edge], plan_id: u64) -> Result<Self, PlanError> {
        if tasks.is_empty() {
            return Err(PlanError::EmptyPlan);
        }
        let mut seen = HashSet::new();
        for t in tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(PlanError::DuplicateTaskId(t.task_id.clone()));
            }
        }
        for (from, to) in edges {
            if !seen.contains(from.as_str()) || !seen.contains(to.as_str()) {
                return Err(PlanError::UnknownEdgeEndpoint {
                    from: from.clone(),
                    to: to.clone(),
                });
            }
        }
        let plan = DagPlan {
            plan_id,
            tasks: tasks
                .iter()
                .map(|t| TaskNode {
                    task_id: t.task_id.clone(),
                    description: t.description.clone(),
                    status: TaskStatus::Pending,
                    answer: None,
                    evidence: Vec::new(),
                })
                .collect(),
            edges: edges.to_vec(),
        };
        if let Some(cycle) = plan.find_cycle() {
            return Err(PlanError::CyclicPlan(cycle));
        }
        Ok(plan)
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskNode> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    fn task_mut(&mut self, task_id: &str) -> Result<&mut TaskNode, PlanError> {
        self.tasks
            .iter_mut()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| PlanError::UnknownTask(task_id.to_string()))
    }

    pub fn predecessors<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(_, to)| to == task_id)
            .map(|(from, _)| from.as_str())
    }

    fn successors<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(from, _)| from == task_id)
            .map(|(_, to)| to.as_str())
    }

    fn unmet_dependencies(&self, task_id: &str) -> Vec<String> {
        let mut missing: Vec<String> = self
            .predecessors(task_id)
            .filter(|p| !self.task(p).is_some_and(TaskNode::is_answered))
            .map(str::to_string)
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    /// Unanswered tasks whose dependencies are all answered, by task id.
    pub fn frontier(&self) -> Vec<String> {
        let mut ready: Vec<String> = self
            .tasks
            .iter()
            .filter(|t| !t.is_answered() && self.unmet_dependencies(&t.task_id).is_empty())
            .map(|t| t.task_id.clone())
            .collect();
        ready.sort();
        ready
    }

    pub fn is_complete(&self) -> bool {
        self.tasks.iter().all(TaskNode::is_answered)
    }

    /// Applies answers in order; all succeed or the plan is left unchanged.
    pub fn apply_task_answer(&self, answers: &[TaskAnswerEntry]) -> Result<DagPlan, PlanError> {
        let mut next = self.clone();
        for entry in answers {
            let node = next
                .task(&entry.task_id)
                .ok_or_else(|| PlanError::UnknownTask(entry.task_id.clone()))?;
            if node.is_answered() {
                return Err(PlanError::AlreadyAnswered(entry.task_id.clone()));
            }
            let missing = next.unmet_dependencies(&entry.task_id);
            if !missing.is_empty() {
                return Err(PlanError::DependencyUnmet {
                    task: entry.task_id.clone(),
                    missing,
                });
            }
            let node = next.task_mut(&entry.task_id)?;
            node.status = TaskStatus::Answered;
            node.answer = Some(entry.answer.clone());
        }
        Ok(next)
    }

    /// Re-opens an answered task and every answered task downstream of it.
    ///
    /// Discarded answers are returned target first, then the rest in
    /// task-id order. Only the target loses its evidence.
    pub fn reset_for_revisit(
        &self,
        task_id: &str,
    ) -> Result<(DagPlan, Vec<DiscardedAnswer>), PlanError> {
        let target = self
            .task(task_id)
            .ok_or_else(|| PlanError::UnknownTask(task_id.to_string()))?;
        if !target.is_answered() {
            return Err(PlanError::NotAnswered(task_id.to_string()));
        }

        let mut reset: BTreeSet<String> = self
            .descendants(task_id)
            .into_iter()
            .filter(|d| self.task(d).is_some_and(TaskNode::is_answered))
            .collect();
        reset.remove(task_id);
        let order = std::iter::once(task_id.to_string()).chain(reset);

        let mut next = self.clone();
        let mut discarded = Vec::new();
        for id in order {
            let node = next.task_mut(&id)?;
            node.status = TaskStatus::Pending;
            if let Some(old_answer) = node.answer.take() {
                discarded.push(DiscardedAnswer {
                    task_id: id.clone(),
                    old_answer,
                });
            }
            if id == task_id {
                node.evidence.clear();
            }
        }
        Ok((next, discarded))
    }

    /// Marks `task_id` as the active task; any previously active task goes
    /// back to pending. Answered tasks keep their status.
    pub fn mark_active(&self, task_id: &str) -> Result<DagPlan, PlanError> {
        if self.task(task_id).is_none() {
            return Err(PlanError::UnknownTask(task_id.to_string()));
        }
        let mut next = self.clone();
        for node in &mut next.tasks {
            if node.status == TaskStatus::Active {
                node.status = TaskStatus::Pending;
            }
            if node.task_id == task_id && node.status == TaskStatus::Pending {
                node.status = TaskStatus::Active;
            }
        }
        Ok(next)
    }

    pub fn add_evidence(&self, task_id: &str, facts: &[String]) -> Result<DagPlan, PlanError> {
        let mut next = self.clone();
        next.task_mut(task_id)?.evidence.extend(facts.iter().cloned());
        Ok(next)
    }

    /// All tasks reachable from `task_id` along dependency edges, excluding
    /// the start unless it lies on a cycle.
    pub fn descendants(&self, task_id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut queue: VecDeque<&str> = self.successors(task_id).collect();
        while let Some(id) = queue.pop_front() {
            if out.insert(id.to_string()) {
                queue.extend(self.successors(id));
            }
        }
        out
    }

    /// Kahn's algorithm; returns the tasks left on a cycle, if any.
    fn find_cycle(&self) -> Option<Vec<String>> {
        let mut indegree: BTreeMap<&str, usize> =
            self.tasks.iter().map(|t| (t.task_id.as_str(), 0)).collect();
        for (_, to) in &self.edges {
            *indegree.get_mut(to.as_str())? += 1;
        }
        let mut queue: VecDeque<&str> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut removed = 0;
        while let Some(id) = queue.pop_front() {
            removed += 1;
            for (from, to) in &self.edges {
                if from == id {
                    let d = indegree.get_mut(to.as_str())?;
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(to.as_str());
                    }
                }
            }
        }
        if removed == self.tasks.len() {
            None
        } else {
            Some(
                indegree
                    .into_iter()
                    .filter(|(_, d)| *d > 0)
                    .map(|(id, _)| id.to_string())
                    .collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(ids: &[&str]) -> Vec<TaskSpec> {
        ids.iter()
            .map(|id| TaskSpec {
                task_id: id.to_string(),
                description: format!("solve {id}"),
            })
            .collect()
    }

    fn edges(pairs: &[(&str, &str)]) -> Vec<Edge> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn answer(id: &str, text: &str) -> TaskAnswerEntry {
        TaskAnswerEntry {
            task_id: id.into(),
            answer: text.into(),
        }
    }

    fn diamond() -> DagPlan {
        DagPlan::build(
            &specs(&["t1", "t2", "t3"]),
            &edges(&[("t1", "t3"), ("t2", "t3")]),
            0,
        )
        .unwrap()
    }

    #[test]
    fn builds_valid_plan_with_pending_nodes() {
        let plan = diamond();
        assert_eq!(plan.tasks.len(), 3);
        assert!(plan.tasks.iter().all(|t| t.status == TaskStatus::Pending));
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            DagPlan::build(&specs(&["t1", "t2"]), &edges(&[("t1", "t2"), ("t2", "t1")]), 0),
            Err(PlanError::CyclicPlan(_))
        ));
        assert_eq!(DagPlan::build(&[], &[], 0), Err(PlanError::EmptyPlan));
        assert_eq!(
            DagPlan::build(&specs(&["t1", "t1"]), &[], 0),
            Err(PlanError::DuplicateTaskId("t1".into()))
        );
        assert!(matches!(
            DagPlan::build(&specs(&["t1"]), &edges(&[("t1", "t9")]), 0),
            Err(PlanError::UnknownEdgeEndpoint { .. })
        ));
        assert!(matches!(
            DagPlan::build(&specs(&["t1"]), &edges(&[("t1", "t1")]), 0),
            Err(PlanError::CyclicPlan(_))
        ));
    }

    #[test]
    fn frontier_progresses() {
        let plan = diamond();
        assert_eq!(plan.frontier(), vec!["t1", "t2"]);
        let plan = plan
            .apply_task_answer(&[answer("t1", "a"), answer("t2", "b")])
            .unwrap();
        assert_eq!(plan.frontier(), vec!["t3"]);
        let plan = plan.apply_task_answer(&[answer("t3", "c")]).unwrap();
        assert!(plan.frontier().is_empty());
        assert!(plan.is_complete());
    }

    #[test]
    fn answering_out_of_order_is_rejected() {
        let chain = DagPlan::build(&specs(&["t1", "t3"]), &edges(&[("t1", "t3")]), 0).unwrap();
        assert_eq!(
            chain.apply_task_answer(&[answer("t3", "x")]),
            Err(PlanError::DependencyUnmet {
                task: "t3".into(),
                missing: vec!["t1".into()]
            })
        );
        let after = chain.apply_task_answer(&[answer("t1", "1950")]).unwrap();
        assert_eq!(after.task("t1").unwrap().answer.as_deref(), Some("1950"));
        assert_eq!(after.frontier(), vec!["t3"]);
        assert_eq!(
            after.apply_task_answer(&[answer("t1", "again")]),
            Err(PlanError::AlreadyAnswered("t1".into()))
        );
        assert_eq!(
            after.apply_task_answer(&[answer("t7", "?")]),
            Err(PlanError::UnknownTask("t7".into()))
        );
    }

    #[test]
    fn multi_answer_is_atomic() {
        let chain = DagPlan::build(&specs(&["t1", "t2"]), &edges(&[("t1", "t2")]), 0).unwrap();
        let both = chain
            .apply_task_answer(&[answer("t1", "a"), answer("t2", "b")])
            .unwrap();
        assert!(both.is_complete());
        let err = chain.apply_task_answer(&[answer("t1", "a"), answer("t9", "b")]);
        assert!(err.is_err());
        assert!(!chain.task("t1").unwrap().is_answered());
    }

    #[test]
    fn revisit_resets_answered_descendants() {
        let chain = DagPlan::build(&specs(&["t1", "t2"]), &edges(&[("t1", "t2")]), 0)
            .unwrap()
            .apply_task_answer(&[answer("t1", "a1"), answer("t2", "a2")])
            .unwrap()
            .add_evidence("t1", &["fact".into()])
            .unwrap();
        let (reset, discarded) = chain.reset_for_revisit("t1").unwrap();
        assert!(reset.tasks.iter().all(|t| t.status == TaskStatus::Pending));
        assert!(reset.task("t1").unwrap().evidence.is_empty());
        assert_eq!(
            discarded,
            vec![
                DiscardedAnswer {
                    task_id: "t1".into(),
                    old_answer: "a1".into()
                },
                DiscardedAnswer {
                    task_id: "t2".into(),
                    old_answer: "a2".into()
                },
            ]
        );

        let (leaf_reset, d) = chain.reset_for_revisit("t2").unwrap();
        assert_eq!(d.len(), 1);
        assert!(leaf_reset.task("t1").unwrap().is_answered());

        assert_eq!(
            reset.reset_for_revisit("t1").unwrap_err(),
            PlanError::NotAnswered("t1".into())
        );
        assert_eq!(
            reset.reset_for_revisit("zz").unwrap_err(),
            PlanError::UnknownTask("zz".into())
        );
    }

    #[test]
    fn completeness() {
        let plan = DagPlan::build(&specs(&["a", "b", "c", "d", "e"]), &[], 0).unwrap();
        assert!(!plan.is_complete());
        let almost = plan
            .apply_task_answer(&[answer("a", "1"), answer("b", "1"), answer("c", "1"), answer("d", "1")])
            .unwrap();
        assert!(!almost.is_complete());
        assert!(almost.apply_task_answer(&[answer("e", "1")]).unwrap().is_complete());
    }

    #[test]
    fn active_marker_moves() {
        let plan = diamond().mark_active("t1").unwrap();
        assert_eq!(plan.task("t1").unwrap().status, TaskStatus::Active);
        let plan = plan.mark_active("t2").unwrap();
        assert_eq!(plan.task("t1").unwrap().status, TaskStatus::Pending);
        assert_eq!(plan.task("t2").unwrap().status, TaskStatus::Active);
        assert_eq!(plan.frontier(), vec!["t1", "t2"]);
        assert!(plan.mark_active("nope").is_err());
    }
}
