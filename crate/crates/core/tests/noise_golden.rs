use prof_core::noise::{synthesize_noisy, NoiseConfig, NoisySet};
use prof_core::trajectory::Trajectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

// obs dim 1 is constant, so it is never perturbed
const STATES: [f32; 10] = [0.0, 1.0, 0.5, 1.0, 1.5, 1.0, 2.0, 1.0, 3.5, 1.0];
const ACTIONS: [f32; 4] = [0.2, -0.4, 0.6, 0.0];
const REWARDS: [f32; 4] = [1.0, 2.0, -1.0, 0.5];

const PINNED: &str = "8f63bc5d86f1b4f7ecb8512620812e0ffca6247f73b1d2de4a629fa5a39ba2c7";

fn expert() -> Trajectory {
    Trajectory::new(2, 1, STATES.to_vec(), ACTIONS.to_vec(), Some(REWARDS.to_vec())).unwrap()
}

fn cfg() -> NoiseConfig {
    NoiseConfig { alpha_o: 0.05, alpha_a: 0.1, h_count: 3, seed: 42 }
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Rebuilds member `h` as flat (states, actions) in per-transition order.
fn rebuild(h: u64, sigma_o: &[f64], sigma_a: f64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    rng.set_stream(h);
    let mut draw = |v: f32, s: f64| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if s > 0.0 {
            (v as f64 + s * z) as f32
        } else {
            v
        }
    };
    let (mut st, mut ac) = (Vec::new(), Vec::new());
    for t in 0..3 {
        for d in 0..2 {
            st.push(draw(STATES[2 * t + d], sigma_o[d]));
        }
        ac.push(draw(ACTIONS[t], sigma_a));
        for d in 0..2 {
            st.push(draw(STATES[2 * (t + 1) + d], sigma_o[d]));
        }
    }
    st.extend_from_slice(&STATES[6..10]);
    ac.push(ACTIONS[3]);
    (st, ac)
}

#[test]
fn members_match_independent_rebuild() {
    let set = synthesize_noisy(&expert(), &cfg()).unwrap();
    let x: Vec<f64> = [0.0, 0.5, 1.5, 2.0].to_vec();
    let sigma_o = [0.05 * pop_std(&x), 0.0];
    let sigma_a = 0.1 * pop_std(&ACTIONS.map(f64::from));
    assert!((set.sigma_o()[0] - sigma_o[0]).abs() < 1e-12, "{:?} vs {sigma_o:?}", set.sigma_o());
    assert_eq!(set.sigma_o()[1], 0.0);
    assert!((set.sigma_a()[0] - sigma_a).abs() < 1e-12);

    let mut hasher = Sha256::new();
    hasher.update(3u64.to_le_bytes());
    hasher.update(42u64.to_le_bytes());
    for s in set.sigma_o().iter().chain(set.sigma_a()) {
        hasher.update(s.to_le_bytes());
    }
    for h in 0..3 {
        let (st, ac) = rebuild(h as u64, &sigma_o, sigma_a);
        let m = set.get(h);
        assert_eq!(m.states(), st.as_slice(), "member {h}");
        assert_eq!(m.actions(), ac.as_slice(), "member {h}");
        assert_eq!(m.rewards().unwrap(), REWARDS.as_slice());
        hasher.update(4u64.to_le_bytes());
        for v in st.iter().chain(&ac).chain(&REWARDS) {
            hasher.update(v.to_le_bytes());
        }
    }
    assert_eq!(set.digest(), hex::encode(hasher.finalize()));
}

#[test]
fn digest_is_pinned() {
    let stored = synthesize_noisy(&expert(), &cfg()).unwrap();
    let lazy = NoisySet::on_demand(&expert(), &cfg()).unwrap();
    assert_eq!(stored.digest(), lazy.digest());
    assert_eq!(stored.digest(), PINNED);
}
