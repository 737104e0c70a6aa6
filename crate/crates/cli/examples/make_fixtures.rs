//! Regenerates the committed fixtures deterministically: the frozen 2-user
//! scenario whose exact optimum is (28, 31), three frozen 20-user
//! scenarios, and the hand-scripted micro dataset. Also prints the
//! reference numbers frozen into tests.

use diffalloc_core::env::{
    sample_scenario, utility, AdjustAction, EpisodeRunner, NetworkScenario, PowerAllocation,
    ScenarioRanges,
};
use diffalloc_core::oracle;
use diffalloc_core::sac::{export_dataset, CollectedEpisode};
use std::path::Path;

fn scripted_episode(
    scn: &NetworkScenario,
    start: Vec<u32>,
    moves: &[(usize, i32)],
) -> CollectedEpisode {
    let initial = PowerAllocation { levels: start };
    let mut runner = EpisodeRunner::new(scn.clone(), initial, moves.len()).unwrap();
    let mut states = vec![runner.state.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for &(user, delta) in moves {
        let action = AdjustAction { user, delta };
        let step = runner.step(action).unwrap();
        states.push(step.next_state.clone());
        actions.push(action);
        rewards.push(step.reward);
    }
    let ret = rewards.iter().sum();
    CollectedEpisode {
        scenario: scn.clone(),
        states,
        actions,
        rewards,
        ret,
    }
}

fn main() {
    let fixtures = Path::new("fixtures");
    std::fs::create_dir_all(fixtures.join("twenty_user")).unwrap();

    // 2-user scenario: each user on its own base station, weak symmetric
    // cross-interference; exact optimum at (28, 31).
    let two_user = NetworkScenario {
        num_base_stations: 2,
        num_users: 2,
        channel_gain: vec![vec![1.05, 0.03], vec![0.03, 0.70]],
        noise_power: 1.0,
        power_levels: 40,
        bandwidth: 1.0,
        revenue_weight: 10.0,
        cost_coeff: 0.05,
        association: vec![0, 1],
        rng_seed: 2031,
    };
    let (best, best_u) = oracle::exhaustive(&two_user).unwrap();
    println!("two_user optimum: {:?} U*={best_u:.12}", best.levels);
    assert_eq!(best.levels, vec![28, 31]);
    two_user.save(&fixtures.join("two_user.toml")).unwrap();

    // Flatness of the optimum: how much of the grid is within 1%.
    let mut above = 0;
    let mut total = 0;
    let mut p = PowerAllocation::zeros(2);
    for a in 0..=40 {
        for b in 0..=40 {
            p.levels[0] = a;
            p.levels[1] = b;
            total += 1;
            if utility(&two_user, &p) >= 0.99 * best_u {
                above += 1;
            }
        }
    }
    println!("grid points at >=99% of U*: {above}/{total}");
    println!("U(0,0) = {}", utility(&two_user, &PowerAllocation::zeros(2)));

    // Frozen 20-user scenarios for the relative comparison table.
    let ranges = ScenarioRanges {
        num_users: 20,
        num_base_stations: 2,
        ..ScenarioRanges::default()
    };
    for (i, seed) in [101u64, 102, 103].into_iter().enumerate() {
        let scn = sample_scenario(&ranges, seed).unwrap();
        let path = fixtures.join(format!("twenty_user/scenario_{i}.toml"));
        scn.save(&path).unwrap();
        let (p, u) = oracle::coordinate_ascent(&scn, &PowerAllocation::zeros(20), 16).unwrap();
        println!(
            "twenty_user[{i}] seed {seed}: ascent U={u:.6} sum_levels={}",
            p.levels.iter().sum::<u32>()
        );
    }

    // Micro dataset: tiny grid, three scripted episodes, two of which hit
    // clamp no-ops at the grid edges.
    let micro = NetworkScenario {
        num_base_stations: 1,
        num_users: 2,
        channel_gain: vec![vec![2.0], vec![0.5]],
        noise_power: 1.0,
        power_levels: 3,
        bandwidth: 1.0,
        revenue_weight: 10.0,
        cost_coeff: 0.05,
        association: vec![0, 0],
        rng_seed: 7,
    };
    micro.save(&fixtures.join("micro_scenario.toml")).unwrap();
    let episodes = vec![
        scripted_episode(&micro, vec![0, 0], &[(0, 1), (1, 1), (0, 1), (0, 1)]),
        scripted_episode(&micro, vec![0, 0], &[(0, -1), (1, 1), (1, -1), (0, 1)]),
        scripted_episode(&micro, vec![3, 3], &[(0, 1), (1, -1), (1, -1), (0, -1)]),
    ];
    for (i, e) in episodes.iter().enumerate() {
        println!("micro[{i}] return = {}", e.ret);
    }
    let store = export_dataset(&episodes).unwrap();
    store.save(&fixtures.join("micro.jsonl")).unwrap();
    let m = store
        .compute_metrics(diffalloc_core::store::ConditionFilter::default())
        .unwrap();
    println!("micro tq={} ({:?}) saco={}", m.tq, m.tq.to_bits(), m.saco);
}
