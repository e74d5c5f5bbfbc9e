mod common;

use std::sync::Arc;

use common::*;
use cotscale::controller::{
    run_multi_turn, run_parallel, run_sequential, select_best, BudgetPolicy, ControllerConfig, ParallelConfig, RunError,
};
use cotscale::protocol::mock::{Satisfaction, Script, ScriptEntry, StochasticPolicy};
use cotscale::protocol::{BackendRole, Backends};
use cotscale::trajectory::{RoundAction, TerminalStatus};
use proptest::prelude::*;
use serde_json::json;

fn config(policy: BudgetPolicy) -> ControllerConfig {
    ControllerConfig::default().with_policy(policy).with_seed(11)
}

fn reasoner_calls(mock: &cotscale::protocol::mock::ScriptedMock) -> usize {
    mock.transcript()
        .iter()
        .filter(|e| e.role == BackendRole::Reasoner)
        .count()
}

#[tokio::test]
async fn early_satisfaction_is_overridden_under_force_exact() {
    let dir = tempfile::tempdir().unwrap();
    let script = decision_script(&[Decision::Edit, Decision::Satisfied, Decision::Satisfied]);
    let (backends, _mock) = scripted(script, dir.path());
    let t = run_sequential(
        "a cat wearing a red hat",
        &config(BudgetPolicy::force_exact(4)),
        &backends,
    )
    .await
    .unwrap();
    assert_eq!(t.image_count(), 4);
    assert_eq!(t.terminal_status, TerminalStatus::BudgetExhausted);
    let forced: Vec<u32> = t.rounds.iter().filter(|r| r.forced).map(|r| r.index).collect();
    assert_eq!(forced, vec![3, 4]);
    assert!(t.rounds[2..].iter().all(|r| r.action_taken == RoundAction::ForcedEdit));
    assert_eq!(forced_requests(&t), 2);
    assert_eq!(t.provenance["forced_rounds"], "2");
    assert_eq!(t.provenance["images_charged"], "4");
    t.validate().unwrap();
}

#[tokio::test]
async fn never_satisfied_runs_out_of_budget() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script::new().push(BackendRole::Reasoner, decide(&edit_text(EDIT)).sticky());
    let (backends, _mock) = scripted(script, dir.path());
    let t = run_sequential("a lighthouse at dusk", &config(BudgetPolicy::force_exact(3)), &backends)
        .await
        .unwrap();
    assert_eq!(t.image_count(), 3);
    assert_eq!(t.terminal_status, TerminalStatus::BudgetExhausted);
    assert!(t.rounds.iter().all(|r| !r.forced));
    assert_eq!(forced_requests(&t), 0);
}

#[tokio::test]
async fn single_image_budget_never_consults_the_reasoner() {
    let dir = tempfile::tempdir().unwrap();
    let (backends, mock) = scripted_without_reasoner(Script::new(), dir.path());
    for policy in [BudgetPolicy::force_exact(1), BudgetPolicy::early_stop(1)] {
        let t = run_sequential("a bowl of ramen", &config(policy), &backends)
            .await
            .unwrap();
        assert_eq!(t.image_count(), 1);
        assert_eq!(t.rounds[0].action_taken, RoundAction::InitialGenerate);
    }
    assert_eq!(reasoner_calls(&mock), 0);
}

#[tokio::test]
async fn early_stop_ends_when_satisfied() {
    let dir = tempfile::tempdir().unwrap();
    let policy = StochasticPolicy {
        satisfaction: Satisfaction::PerRound { p: 1.0 },
        ..StochasticPolicy::default()
    };
    let backends = stochastic(5, policy, dir.path());
    let t = run_sequential("a red bicycle", &config(BudgetPolicy::early_stop(10)), &backends)
        .await
        .unwrap();
    assert_eq!(t.image_count(), 1);
    assert_eq!(t.terminal_status, TerminalStatus::SatisfiedComplete);
    assert_eq!(t.provenance["images_charged"], "1");
}

#[tokio::test]
async fn premature_stop_is_forced_under_force_exact() {
    let dir = tempfile::tempdir().unwrap();
    let script = decision_script(&[Decision::Premature, Decision::Edit]);
    let (backends, _mock) = scripted(script, dir.path());
    let t = run_sequential("a city skyline", &config(BudgetPolicy::force_exact(3)), &backends)
        .await
        .unwrap();
    assert_eq!(t.image_count(), 3);
    assert!(t.rounds[1].forced);
    assert!(!t.rounds[2].forced);
    assert_eq!(forced_requests(&t), 1);
}

#[tokio::test]
async fn multi_turn_chains_answers() {
    let dir = tempfile::tempdir().unwrap();
    let (backends, _mock) = scripted_without_reasoner(Script::new(), dir.path());
    let turns: Vec<String> = ["a wooden cabin", "add snow on the roof", "make it night time"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let out = run_multi_turn(&turns, &config(BudgetPolicy::force_exact(1)), &backends)
        .await
        .unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].rounds[0].action_taken, RoundAction::InitialGenerate);
    for k in 1..3 {
        let first = &out[k].rounds[0];
        assert_eq!(first.action_taken, RoundAction::Edit);
        assert_eq!(first.input_image.as_ref(), out[k - 1].final_image());
        assert_eq!(first.edit_instruction.as_deref(), Some(turns[k].as_str()));
        assert_eq!(out[k].image_count(), 1);
    }
    assert!(out[2].id.ends_with("-turn3"));

    let err = run_multi_turn(&turns, &config(BudgetPolicy::force_exact(5)), &backends)
        .await
        .unwrap_err();
    assert!(matches!(err, RunError::Precondition(_)), "{err}");
}

#[tokio::test]
async fn backtrack_restores_an_earlier_image() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script::new()
        .push(BackendRole::Reasoner, decide(&edit_text(EDIT)))
        .push(BackendRole::Reasoner, decide(&edit_text(EDIT)))
        .push(
            BackendRole::Reasoner,
            decide(&backtrack_text(1, "start again and draw the dog on the left")),
        );
    let (backends, _mock) = scripted(script, dir.path());
    let t = run_sequential("a dog and a cat", &config(BudgetPolicy::max_rounds(4)), &backends)
        .await
        .unwrap();
    let actions: Vec<RoundAction> = t.rounds.iter().map(|r| r.action_taken).collect();
    assert_eq!(
        actions,
        [
            RoundAction::InitialGenerate,
            RoundAction::Edit,
            RoundAction::Edit,
            RoundAction::Backtrack,
            RoundAction::Edit
        ]
    );
    assert_eq!(t.rounds[3].output_image, t.rounds[0].output_image);
    assert_eq!(t.rounds[4].input_image, t.rounds[0].output_image);
    assert_eq!(t.image_count(), 4);
    assert_eq!(t.terminal_status, TerminalStatus::BudgetExhausted);
    t.validate().unwrap();
}

#[tokio::test]
async fn backtrack_to_a_missing_round_is_a_parse_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = decide(&backtrack_text(7, "go back to the very first draft")).sticky();
    let (backends, _mock) = scripted(Script::new().push(BackendRole::Reasoner, bad), dir.path());
    let err = run_sequential("a teapot", &config(BudgetPolicy::max_rounds(4)), &backends)
        .await
        .unwrap_err();
    let RunError::Parser { trajectory, .. } = err else {
        panic!("expected a parser failure, got {err}");
    };
    assert_eq!(trajectory.terminal_status, TerminalStatus::Error);
    assert_eq!(trajectory.image_count(), 1);
}

#[tokio::test]
async fn unparseable_replies_are_reasked_then_fail() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = ScriptEntry::reply(reply("hmm, hard to say", false));
    let script = Script::new()
        .push(BackendRole::Reasoner, garbage.clone())
        .push(BackendRole::Reasoner, decide(&satisfied_text()));
    let (backends, _mock) = scripted(script, dir.path());
    let t = run_sequential("a kite", &config(BudgetPolicy::early_stop(5)), &backends)
        .await
        .unwrap();
    assert_eq!(t.terminal_status, TerminalStatus::SatisfiedComplete);
    assert!(t.provenance["warnings"].contains("unparseable"));

    let dir = tempfile::tempdir().unwrap();
    let (backends, _mock) = scripted(Script::new().push(BackendRole::Reasoner, garbage.sticky()), dir.path());
    let err = run_sequential("a kite", &config(BudgetPolicy::early_stop(5)), &backends)
        .await
        .unwrap_err();
    assert!(matches!(err, RunError::Parser { .. }));
    assert_eq!(err.trajectory().unwrap().rounds.len(), 1);
}

#[tokio::test]
async fn backend_failure_keeps_the_partial_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script::new()
        .push(BackendRole::Reasoner, decide(&edit_text(EDIT)))
        .push(BackendRole::Reasoner, ScriptEntry::failure(400, "bad_prompt").sticky());
    let (backends, _mock) = scripted(script, dir.path());
    let err = run_sequential("a castle", &config(BudgetPolicy::force_exact(5)), &backends)
        .await
        .unwrap_err();
    let t = err.trajectory().unwrap();
    assert!(matches!(err, RunError::Backend { .. }));
    assert_eq!(t.image_count(), 2);
    assert!(t.provenance["error"].contains("bad_prompt"));
}

#[tokio::test]
async fn low_change_edits_are_skipped_but_charged() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script::new()
        .push(BackendRole::Reasoner, decide(&edit_text(EDIT)).sticky())
        .push(
            BackendRole::DistanceMetric,
            ScriptEntry::reply(json!({"distance": 0.01})),
        )
        .push(
            BackendRole::DistanceMetric,
            ScriptEntry::reply(json!({"distance": 0.4})).sticky(),
        );
    let (backends, _mock) = scripted(script, dir.path());
    let mut cfg = config(BudgetPolicy::max_rounds(3));
    cfg.skip_min_change = Some(0.02);
    let t = run_sequential("a sailboat", &cfg, &backends).await.unwrap();
    assert_eq!(t.image_count(), 3);
    assert_eq!(t.provenance["images_charged"], "4");
    let skipped: Vec<serde_json::Value> = serde_json::from_str(&t.provenance["skipped_rounds"]).unwrap();
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0]["after_round"], 1);
}

#[tokio::test]
async fn repeated_low_change_triggers_a_reset() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script::new()
        .push(BackendRole::Reasoner, decide(&edit_text(EDIT)).sticky())
        .push(
            BackendRole::DistanceMetric,
            ScriptEntry::reply(json!({"distance": 0.01})),
        )
        .push(
            BackendRole::DistanceMetric,
            ScriptEntry::reply(json!({"distance": 0.02})),
        )
        .push(
            BackendRole::DistanceMetric,
            ScriptEntry::reply(json!({"distance": 0.5})).sticky(),
        );
    let (backends, _mock) = scripted(script, dir.path());
    let mut cfg = config(BudgetPolicy::max_rounds(5));
    cfg.reset_enabled = true;
    let t = run_sequential("a garden with tulips", &cfg, &backends).await.unwrap();
    let actions: Vec<RoundAction> = t.rounds.iter().map(|r| r.action_taken).collect();
    assert_eq!(
        actions,
        [
            RoundAction::InitialGenerate,
            RoundAction::Edit,
            RoundAction::Edit,
            RoundAction::Reset,
            RoundAction::Edit
        ]
    );
    assert_eq!(t.provenance["resets"], "1");
    assert_eq!(t.image_count(), 5);
}

#[tokio::test]
async fn missing_reasoner_is_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (backends, _mock) = scripted_without_reasoner(Script::new(), dir.path());
    let err = run_sequential("a fox", &config(BudgetPolicy::force_exact(2)), &backends)
        .await
        .unwrap_err();
    assert!(matches!(err, RunError::Precondition(_)));
    assert!(err.trajectory().is_none());
}

#[tokio::test]
async fn guidance_scales_reach_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let (backends, mock) = scripted_without_reasoner(Script::new(), dir.path());
    run_sequential("a violin", &config(BudgetPolicy::force_exact(1)), &backends)
        .await
        .unwrap();
    let generate = mock
        .transcript()
        .into_iter()
        .find(|e| e.role == BackendRole::Generator)
        .unwrap();
    assert_eq!(generate.request["s_t"], 4.0);
    assert_eq!(generate.request["s_i"], 2.0);
    assert_eq!(generate.request["seed"], 11);
}

fn decisions() -> impl Strategy<Value = Vec<Decision>> {
    prop::collection::vec(
        prop_oneof![
            Just(Decision::Edit),
            Just(Decision::Satisfied),
            Just(Decision::Premature)
        ],
        10,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn force_exact_spends_the_whole_budget(c in 1u32..=10, ds in decisions()) {
        let dir = tempfile::tempdir().unwrap();
        let (backends, _mock) = scripted(decision_script(&ds), dir.path());
        let t = runtime()
            .block_on(run_sequential("three apples on a plate", &config(BudgetPolicy::force_exact(c)), &backends))
            .unwrap();
        prop_assert_eq!(t.image_count(), c as usize);
        let used = &ds[..(c as usize - 1)];
        let early = used.iter().filter(|d| **d != Decision::Edit).count();
        prop_assert_eq!(t.rounds.iter().filter(|r| r.forced).count(), early);
        prop_assert_eq!(forced_requests(&t), early);
    }

    #[test]
    fn capped_modes_never_exceed_the_budget(c in 1u32..=10, ds in decisions(), early in any::<bool>()) {
        let ds: Vec<Decision> = ds.into_iter().map(|d| if d == Decision::Premature { Decision::Edit } else { d }).collect();
        let dir = tempfile::tempdir().unwrap();
        let (backends, _mock) = scripted(decision_script(&ds), dir.path());
        let policy = if early { BudgetPolicy::early_stop(c) } else { BudgetPolicy::max_rounds(c) };
        let t = runtime().block_on(run_sequential("three apples on a plate", &config(policy), &backends)).unwrap();
        prop_assert!(t.image_count() <= c as usize);
        prop_assert!(t.rounds.iter().all(|r| !r.forced));
        let first_stop = ds.iter().position(|d| *d == Decision::Satisfied).map(|p| p + 1);
        let expected = first_stop.map_or(c as usize, |p| p.min(c as usize));
        prop_assert_eq!(t.image_count(), expected);
    }
}

fn table(dir: &std::path::Path, scores: &[f64], delays_ms: &[u64]) -> Backends {
    let store = store(dir);
    let endpoint = Arc::new(TableBackend {
        store: store.clone(),
        scores: scores.to_vec(),
        delays_ms: delays_ms.to_vec(),
    });
    Backends::new(store)
        .with(BackendRole::Generator, endpoint.clone(), fast())
        .with(BackendRole::Scorer, endpoint, fast())
}

#[tokio::test]
async fn best_of_n_picks_the_first_highest_score() {
    let dir = tempfile::tempdir().unwrap();
    let backends = table(dir.path(), &[0.2, 0.9, 0.9, 0.5], &[0, 0, 0, 0]);
    let cfg = ParallelConfig {
        n: 4,
        ..ParallelConfig::default()
    };
    let out = run_parallel("a red umbrella", &cfg, &backends).await.unwrap();
    assert_eq!(out.chosen_index, 1);
    assert_eq!(out.images_generated(), 4);
    assert_eq!(out.chosen().score, 0.9);
}

#[tokio::test]
async fn best_of_n_ignores_response_latency() {
    let scores = [0.3, 0.7, 0.1, 0.7, 0.65];
    let mut seen = Vec::new();
    for delays in [[0, 0, 0, 0, 0], [40, 1, 25, 5, 12], [1, 30, 2, 20, 50]] {
        let dir = tempfile::tempdir().unwrap();
        let backends = table(dir.path(), &scores, &delays);
        let cfg = ParallelConfig {
            n: 5,
            ..ParallelConfig::default()
        };
        let out = run_parallel("a red umbrella", &cfg, &backends).await.unwrap();
        assert_eq!(
            out.candidates.iter().map(|c| c.index).collect::<Vec<_>>(),
            [0, 1, 2, 3, 4]
        );
        seen.push(out);
    }
    assert_eq!(seen[0].chosen_index, 1);
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn best_of_n_is_deterministic_and_monotone_in_n() {
    let dir = tempfile::tempdir().unwrap();
    let backends = stochastic(21, StochasticPolicy::default(), dir.path());
    let mut best = f64::NEG_INFINITY;
    for n in 1..=10 {
        let cfg = ParallelConfig {
            n,
            base_seed: 100,
            ..ParallelConfig::default()
        };
        let a = run_parallel("two green birds on a fence", &cfg, &backends)
            .await
            .unwrap();
        let b = run_parallel("two green birds on a fence", &cfg, &backends)
            .await
            .unwrap();
        assert_eq!(a, b);
        let scores: Vec<f64> = a.candidates.iter().map(|c| c.score).collect();
        assert_eq!(select_best(&scores), Some(a.chosen_index as usize));
        assert!(a.chosen().score >= best);
        best = a.chosen().score;
    }
}

#[tokio::test]
async fn best_of_n_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let backends = stochastic(1, StochasticPolicy::default(), dir.path());
    let cfg = ParallelConfig {
        n: 0,
        ..ParallelConfig::default()
    };
    assert!(matches!(
        run_parallel("x", &cfg, &backends).await,
        Err(cotscale::controller::ParallelError::Precondition(_))
    ));
}
