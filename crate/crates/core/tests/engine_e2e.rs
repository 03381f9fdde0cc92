mod common;

use common::*;
use regsearch::engine::RunConfig;
use regsearch::protocol::ActionKind;
use regsearch::register::Register;
use regsearch::tokenizer::{ApproxTokenizer, Tokenizer};
use regsearch::trajectory::{Outcome, Stage};

#[test]
fn two_hop_answers_and_keeps_documents_out_of_the_register() {
    let r = run_two_hop();
    assert_eq!(r.final_answer(), Some("Benjamin Harrison"));
    let t = &r.trajectory;
    assert_eq!(t.steps.len(), 9);
    assert!(t.steps[..2].iter().all(|s| s.stage == Stage::Planning));

    let docs: Vec<String> = t
        .recorded_tool_results()
        .iter()
        .flat_map(|r| r.documents.iter().map(|d| d.text.clone()))
        .collect();
    assert!(!docs.is_empty());
    for s in &t.steps {
        for d in &docs {
            assert!(!s.state.contains(d.as_str()), "raw document in state of step {}", s.index);
        }
    }
    // The documents are visible exactly on the turn after each search.
    let with_docs: Vec<usize> = t
        .steps
        .iter()
        .filter(|s| s.ephemeral.is_some())
        .map(|s| s.index)
        .collect();
    assert_eq!(with_docs, vec![4, 7]);
    assert!(t.steps[3].input().contains("Eiffel Tower is a wrought-iron"));

    let last = t.steps.last().unwrap().register.as_ref().unwrap();
    assert!(last.plan().is_complete());
    assert_eq!(last.current.tool_log.len(), 2);
    assert_eq!(last.current.tool_log[1].source_ids, vec!["wiki:harrison", "wiki:cleveland"]);
}

#[test]
fn state_tokens_never_decrease_within_an_epoch() {
    let r = run_synthetic();
    let counts: Vec<usize> = r.turn_stats.iter().map(|s| s.state_tokens).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    let tok = ApproxTokenizer;
    for s in r.trajectory.solving_steps() {
        assert_eq!(tok.count(&s.state), s.state_tokens);
        assert_eq!(tok.count(&s.input()), s.input_tokens);
    }
}

#[test]
fn non_terminal_actions_exhaust_the_turn_budget() {
    let mut script = vec![intent("loop"), framing(&["t1"], &[])];
    for i in 0..41 {
        script.push(tool_call("t1", &format!("query {i}")));
    }
    let r = scripted_engine(script, fixture_tools(), RunConfig::default()).run(None, "q");
    assert_eq!(r.outcome, Outcome::BudgetExhausted);
    assert_eq!(r.trajectory.solving_steps().count(), 40);
}

#[test]
fn premature_final_is_reprompted_once_then_aborts() {
    let base = vec![intent("x"), framing(&["t1", "t2"], &[("t1", "t2")])];

    let mut recovers = base.clone();
    recovers.push(final_answer("too early"));
    recovers.push(answer("t1", "a"));
    recovers.push(answer("t2", "b"));
    recovers.push(final_answer("b"));
    let r = scripted_engine(recovers, fixture_tools(), RunConfig::default()).run(None, "q");
    assert_eq!(r.final_answer(), Some("b"));
    let first = &r.trajectory.steps[2];
    assert_eq!(first.retries.len(), 1);
    assert!(first.retries[0].diagnostic.contains("unanswered"));

    let mut aborts = base;
    aborts.push(final_answer("too early"));
    aborts.push(final_answer("still early"));
    let r = scripted_engine(aborts, fixture_tools(), RunConfig::default()).run(None, "q");
    match &r.outcome {
        Outcome::Aborted { error } => assert!(error.contains("final answer emitted"), "{error}"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(r.trajectory.abandoned.as_ref().unwrap().attempts.len(), 2);
}

#[test]
fn planning_actions_during_solving_are_reprompted() {
    let script = vec![
        intent("x"),
        framing(&["t1"], &[]),
        intent("again"),
        answer("t1", "a"),
        final_answer("a"),
    ];
    let r = scripted_engine(script, fixture_tools(), RunConfig::default()).run(None, "q");
    assert_eq!(r.final_answer(), Some("a"));
    assert!(r.trajectory.steps[2].retries[0].diagnostic.contains("intent_refinement"));
}

#[test]
fn context_cap_overflow_is_reported() {
    let cfg = RunConfig {
        max_context_tokens: 700,
        ..Default::default()
    };
    let r = scripted_engine(load_script("two_hop_script.json"), fixture_tools(), cfg)
        .run(None, TWO_HOP_QUESTION);
    match r.outcome {
        Outcome::ContextOverflow { tokens, cap } => {
            assert_eq!(cap, 700);
            assert!(tokens > 700);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unknown_tool_is_reprompted() {
    let bad = r#"<tool_call>{"arguments":{"query":"x"},"task_id":"t1","tool_name":"nope"}</tool_call>"#;
    let script = vec![
        intent("x"),
        framing(&["t1"], &[]),
        bad.to_string(),
        tool_call("t1", "Eiffel"),
        answer("t1", "a"),
        final_answer("a"),
    ];
    let r = scripted_engine(script, fixture_tools(), RunConfig::default()).run(None, "q");
    assert_eq!(r.final_answer(), Some("a"));
    assert!(r.trajectory.steps[2].retries[0].diagnostic.contains("nope"));
}

#[test]
fn revisit_and_replan_flow() {
    let script = vec![
        intent("x"),
        framing(&["t1", "t2"], &[("t1", "t2")]),
        answer("t1", "wrong"),
        answer("t2", "derived"),
        regsearch::protocol::render_action(&regsearch::protocol::Payload::RevisitTask(
            regsearch::protocol::RevisitPayload {
                task_id: "t1".into(),
                reason: "contradicted".into(),
            },
        ))
        .unwrap(),
        regsearch::protocol::render_action(&regsearch::protocol::Payload::Replanning(
            regsearch::protocol::ReplanPayload {
                reason: "simpler".into(),
                tasks: vec![regsearch::protocol::TaskSpec {
                    task_id: "n1".into(),
                    description: "direct".into(),
                }],
                edges: vec![],
            },
        ))
        .unwrap(),
        answer("n1", "right"),
        final_answer("right"),
    ];
    let r = scripted_engine(script, fixture_tools(), RunConfig::default()).run(None, "q");
    assert_eq!(r.final_answer(), Some("right"));
    let steps = &r.trajectory.steps;
    let after_revisit: &Register = steps[4].register.as_ref().unwrap();
    let discarded: Vec<&str> = after_revisit
        .current
        .revisit_history
        .iter()
        .map(|v| v.discarded_answer.as_str())
        .collect();
    assert_eq!(discarded, vec!["wrong", "derived"]);
    let after_replan = steps[5].register.as_ref().unwrap();
    assert_eq!(after_replan.plan_history.len(), 1);
    assert_eq!(after_replan.plan().plan_id, 1);
    assert!(steps[6].state.contains("## Plan history (discarded plans)"));
    assert_eq!(steps[5].action.kind(), ActionKind::Replanning);
}

#[test]
fn runs_are_independent_across_threads() {
    let handles: Vec<_> = (0..4).map(|_| std::thread::spawn(run_two_hop)).collect();
    let base = serde_json::to_string(&run_two_hop()).unwrap();
    for h in handles {
        assert_eq!(serde_json::to_string(&h.join().unwrap()).unwrap(), base);
    }
}
