use std::collections::HashMap;

use sgs_routing::learner::CostModel;
use sgs_routing::queueing::{sample_transition, simulate_trajectory, total_rate, transition_distribution, State, SystemConfig, TimeMode};
use sgs_routing::rng::RngStreams;

#[test]
fn sampled_transitions_match_the_kernel() {
    let c = SystemConfig::three_server_preset();
    let x = State(vec![2, 0, 1]);
    let mut streams = RngStreams::new(11, 0);
    let draws = 200_000;
    let mut counts: HashMap<State, u64> = HashMap::new();
    for k in 0..draws {
        let s = sample_transition(&c, &x, 1, k, &mut streams).unwrap();
        *counts.entry(s.next_state).or_default() += 1;
    }
    for (next, p) in transition_distribution(&c, &x, 1).unwrap() {
        let freq = counts.get(&next).copied().unwrap_or(0) as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() < 5.0 * se, "{next:?}: {freq} vs {p}");
    }
    assert_eq!(counts.len(), 3);
}

#[test]
fn holding_times_have_mean_one_over_rate() {
    let c = SystemConfig::three_server_preset();
    let x = State(vec![1, 1, 0]);
    let rate = total_rate(&c, &x);
    let mut streams = RngStreams::new(12, 0);
    let n = 200_000;
    let mean = (0..n)
        .map(|k| sample_transition(&c, &x, 0, k, &mut streams).unwrap().holding_time)
        .sum::<f64>()
        / n as f64;
    // Exponential: SE of the mean is (1/rate)/√n.
    assert!((mean - 1.0 / rate).abs() < 5.0 / rate / (n as f64).sqrt(), "{mean} vs {}", 1.0 / rate);
}

#[test]
fn expected_time_mode_is_deterministic_and_matches_rate() {
    let c = SystemConfig::new(1.0, vec![2.0], 0).unwrap();
    let t = simulate_trajectory(&c, State::zeros(1), |_: &State, _| 0, 1000, &CostModel::AggregateLog, TimeMode::Expected, RngStreams::new(1, 0)).unwrap();
    for k in 0..t.len() {
        let x = State(t.state(k).to_vec());
        assert_eq!(t.dts[k], 1.0 / total_rate(&c, &x));
    }
}

#[test]
fn same_seed_same_trajectory() {
    let c = SystemConfig::three_server_preset();
    let run = |seed| {
        simulate_trajectory(&c, State::zeros(3), |x: &State, _| sgs_routing::policy::jsq_action(x.as_slice()), 5000, &CostModel::AggregateLog, TimeMode::Sampled, RngStreams::new(seed, 0)).unwrap()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).states, run(4).states);
}
