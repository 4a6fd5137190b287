mod common;

use std::time::{Duration, Instant};

use common::*;
use prof_core::reward::{
    parse, Arity, EvalError, ExternalConfig, ExternalReward, ParseContext, RewardFunction, RewardSource, SourceMode,
};

fn script() -> String {
    fixture("external/reward.py").to_str().unwrap().to_string()
}

fn program(args: &str, obs_dim: usize, act_dim: usize, arity: Arity, timeout: Duration) -> Result<ExternalReward, EvalError> {
    let src = RewardSource {
        text: format!("python3 {} {args}", script()),
        mode: SourceMode::ExternalProgram,
        arity,
    };
    let mut cfg = ExternalConfig::from_source(&src, &ParseContext::new(obs_dim, act_dim, arity))?;
    cfg.timeout = timeout;
    ExternalReward::spawn(cfg)
}

#[test]
fn agrees_with_expression_evaluator() {
    let (d_o, d_a) = (5, 3);
    let ext = program("linear", d_o, d_a, Arity::WithAction, Duration::from_secs(10)).unwrap();
    let ctx = ParseContext::new(d_o, d_a, Arity::WithAction);
    let expr = parse(&RewardSource::expression("obs[0] + 2.0 * act[1] - norm2(next)", Arity::WithAction), &ctx).unwrap();
    let mut gen = ExprGen::new(3, d_o, d_a, 1);
    for _ in 0..200 {
        let (o, a, n) = (gen.vector(d_o), gen.vector(d_a), gen.vector(d_o));
        let want = expr.evaluate(&o, &a, &n).unwrap();
        let got = ext.reward(&o, &a, &n).unwrap();
        assert!(close(want, got), "{want} vs {got}");
    }

    let traj = point_mass_dataset(1).trajectories()[0].clone();
    let ext = program("linear", 1, 1, Arity::WithAction, Duration::from_secs(10));
    // point-mass has one action dimension, so act[1] is out of range in the child
    assert!(ext.unwrap().transition_rewards(&traj).is_err());
}

#[test]
fn batch_matches_per_transition() {
    let traj = point_mass_dataset(2).trajectories()[3].clone();
    let ext = program("state", 1, 1, Arity::StateOnly, Duration::from_secs(10)).unwrap();
    let batch = ext.transition_rewards(&traj).unwrap();
    let ctx = ParseContext::new(1, 1, Arity::StateOnly);
    let expr = parse(&RewardSource::expression("-abs(next[0] - 1.0)", Arity::StateOnly), &ctx).unwrap();
    let single = expr.transition_rewards(&traj).unwrap();
    assert_eq!(batch.len(), single.len());
    // state-only requests carry an empty action, so len(act) adds nothing
    for (b, s) in batch.iter().zip(&single) {
        assert!(close(*b, *s), "{b} vs {s}");
    }
}

#[test]
fn nan_reply_is_non_finite() {
    let ext = program("nan", 2, 2, Arity::WithAction, Duration::from_secs(10)).unwrap();
    assert_eq!(ext.reward(&[0.0; 2], &[0.0; 2], &[0.0; 2]), Err(EvalError::NonFinite));
    // the stream stays aligned after a bad reply
    assert_eq!(ext.reward(&[0.0; 2], &[0.0; 2], &[0.0; 2]), Err(EvalError::NonFinite));
}

#[test]
fn handshake_refusal() {
    let err = program("bad-hello", 2, 2, Arity::WithAction, Duration::from_secs(10)).err().unwrap();
    assert!(matches!(err, EvalError::Protocol(_)), "{err:?}");
}

#[test]
fn timeout_then_respawn() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("hung");
    let ext = program(&format!("hang-once {}", marker.display()), 1, 2, Arity::WithAction, Duration::from_millis(500))
        .unwrap();
    let started = Instant::now();
    assert_eq!(ext.reward(&[1.0], &[0.0, 1.0], &[0.0]), Err(EvalError::Timeout { ms: 500 }));
    assert!(started.elapsed() < Duration::from_secs(5));
    // the hung child was killed; a fresh one answers
    let v = ext.reward(&[1.0], &[0.0, 1.0], &[0.0]).unwrap();
    assert!(close(v, 3.0), "{v}");
}
