//! Ground-truth solvers for the allocation objective: exhaustive grid
//! search on small instances and restarted coordinate ascent for the rest.
//! Ties always break toward the lexicographically smallest allocation so
//! fixtures are bit-reproducible.

use crate::env::{utility, NetworkScenario, PowerAllocation};
use crate::error::{Error, Result};
use crate::rng::indexed_rng;
use rand::Rng;

pub const EXHAUSTIVE_GUARD: f64 = 1e7;

/// Number of grid points, or None when it exceeds the guard.
pub fn grid_size(scn: &NetworkScenario) -> Option<u64> {
    let levels = scn.power_levels as f64 + 1.0;
    let points = levels.powi(scn.num_users as i32);
    (points <= EXHAUSTIVE_GUARD).then_some(points as u64)
}

/// Full grid sweep in lexicographic order; strict improvement keeps the
/// first (lexicographically smallest) maximizer.
pub fn exhaustive(scn: &NetworkScenario) -> Result<(PowerAllocation, f64)> {
    scn.validate()?;
    if grid_size(scn).is_none() {
        return Err(Error::InstanceTooLarge(format!(
            "{} users at {} levels is {:.2e} grid points (guard {:.0e})",
            scn.num_users,
            scn.power_levels + 1,
            (scn.power_levels as f64 + 1.0).powi(scn.num_users as i32),
            EXHAUSTIVE_GUARD,
        )));
    }
    let mut p = PowerAllocation::zeros(scn.num_users);
    let mut best = p.clone();
    let mut best_u = utility(scn, &p);
    loop {
        // Odometer increment over the grid, least-significant digit last.
        let mut digit = scn.num_users;
        loop {
            if digit == 0 {
                return Ok((best, best_u));
            }
            digit -= 1;
            if p.levels[digit] < scn.power_levels {
                p.levels[digit] += 1;
                break;
            }
            p.levels[digit] = 0;
        }
        let u = utility(scn, &p);
        if u > best_u {
            best_u = u;
            best = p.clone();
        }
    }
}

/// Best level for one user with all others held fixed; equal utilities
/// resolve to the lowest level.
fn line_search(scn: &NetworkScenario, p: &mut PowerAllocation, user: usize) -> (u32, f64) {
    let mut best_level = 0;
    p.levels[user] = 0;
    let mut best_u = utility(scn, p);
    for level in 1..=scn.power_levels {
        p.levels[user] = level;
        let u = utility(scn, p);
        if u > best_u {
            best_u = u;
            best_level = level;
        }
    }
    p.levels[user] = best_level;
    (best_level, best_u)
}

/// One ascent pass to convergence: sweep users, moving only on strict
/// utility improvement or an equal-utility move to a lower level. Each
/// accepted move strictly decreases (-U, sum of levels) lexicographically,
/// so the loop terminates.
fn ascend(scn: &NetworkScenario, start: &PowerAllocation) -> (PowerAllocation, f64) {
    let mut p = start.clone();
    let mut u_now = utility(scn, &p);
    loop {
        let mut moved = false;
        for user in 0..scn.num_users {
            let before = p.levels[user];
            let (level, u) = line_search(scn, &mut p, user);
            if u > u_now || (u == u_now && level < before) {
                u_now = u;
                moved = moved || level != before;
            } else {
                p.levels[user] = before;
            }
        }
        if !moved {
            return (p, u_now);
        }
    }
}

/// Coordinate ascent with restarts. Restart 0 starts from `start`; later
/// restarts draw random allocations from the scenario's own seed, so the
/// result is a pure function of (scenario, start, restarts).
pub fn coordinate_ascent(
    scn: &NetworkScenario,
    start: &PowerAllocation,
    restarts: usize,
) -> Result<(PowerAllocation, f64)> {
    scn.validate()?;
    start.validate(scn)?;
    let (mut best, mut best_u) = ascend(scn, start);
    for r in 1..restarts.max(1) {
        let mut rng = indexed_rng(scn.rng_seed, "ascent-restart", r as u64);
        let p0 = PowerAllocation {
            levels: (0..scn.num_users)
                .map(|_| rng.gen_range(0..=scn.power_levels))
                .collect(),
        };
        let (p, u) = ascend(scn, &p0);
        if u > best_u || (u == best_u && p.levels < best.levels) {
            best = p;
            best_u = u;
        }
    }
    Ok((best, best_u))
}

/// Coordinate-wise global optimality: no single user can improve utility
/// by moving to any other level.
pub fn is_local_optimum(scn: &NetworkScenario, p: &PowerAllocation) -> bool {
    let u_now = utility(scn, p);
    let mut probe = p.clone();
    for user in 0..scn.num_users {
        let original = probe.levels[user];
        for level in 0..=scn.power_levels {
            if level == original {
                continue;
            }
            probe.levels[user] = level;
            if utility(scn, &probe) > u_now {
                return false;
            }
        }
        probe.levels[user] = original;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_scenario, ScenarioRanges};

    fn small_ranges(seedless_users: usize, levels: u32) -> ScenarioRanges {
        ScenarioRanges {
            num_users: seedless_users,
            num_base_stations: 1,
            power_levels: levels,
            ..ScenarioRanges::default()
        }
    }

    #[test]
    fn single_user_no_cost_optimum_is_full_power() {
        let scn = NetworkScenario {
            num_base_stations: 1,
            num_users: 1,
            channel_gain: vec![vec![2.0]],
            noise_power: 1.0,
            power_levels: 9,
            bandwidth: 1.0,
            revenue_weight: 1.0,
            cost_coeff: 0.0,
            association: vec![0],
            rng_seed: 0,
        };
        let (p, _) = exhaustive(&scn).unwrap();
        assert_eq!(p.levels, vec![9]);
    }

    #[test]
    fn symmetric_scenario_breaks_ties_lexicographically() {
        let scn = NetworkScenario {
            num_base_stations: 1,
            num_users: 2,
            channel_gain: vec![vec![1.0], vec![1.0]],
            noise_power: 1.0,
            power_levels: 6,
            bandwidth: 1.0,
            revenue_weight: 1.0,
            cost_coeff: 0.2,
            association: vec![0, 0],
            rng_seed: 0,
        };
        let (p, u) = exhaustive(&scn).unwrap();
        // The mirrored allocation has identical utility; the reported one
        // must not be lexicographically larger than its mirror.
        let mirrored = PowerAllocation {
            levels: vec![p.levels[1], p.levels[0]],
        };
        assert!((utility(&scn, &mirrored) - u).abs() <= 1e-12 * u.abs().max(1.0));
        assert!(p.levels <= mirrored.levels);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let scn = sample_scenario(&small_ranges(20, 40), 1).unwrap();
        match exhaustive(&scn) {
            Err(Error::InstanceTooLarge(msg)) => {
                assert!(msg.contains("coordinate_ascent") || !msg.is_empty())
            }
            other => panic!("expected InstanceTooLarge, got {other:?}"),
        }
        let err = exhaustive(&scn).unwrap_err().to_string();
        assert!(err.contains("coordinate_ascent"), "message: {err}");
    }

    #[test]
    fn ascent_from_exhaustive_optimum_is_a_fixed_point() {
        for seed in 0..10 {
            let scn = sample_scenario(&small_ranges(3, 8), 100 + seed).unwrap();
            let (best, best_u) = exhaustive(&scn).unwrap();
            let (p, u) = coordinate_ascent(&scn, &best, 1).unwrap();
            assert_eq!(p, best);
            assert_eq!(u, best_u);
        }
    }

    #[test]
    fn ascent_never_decreases_utility() {
        for seed in 0..20 {
            let scn = sample_scenario(&small_ranges(4, 6), 200 + seed).unwrap();
            let mut rng = indexed_rng(seed, "ascent-start", 0);
            let start = PowerAllocation {
                levels: (0..4).map(|_| rng.gen_range(0..=6)).collect(),
            };
            let u0 = utility(&scn, &start);
            let (p, u) = coordinate_ascent(&scn, &start, 1).unwrap();
            assert!(u >= u0);
            assert!(is_local_optimum(&scn, &p));
        }
    }

    #[test]
    fn ascent_matches_exhaustive_on_most_small_instances() {
        let mut hits = 0;
        let total = 100;
        for seed in 0..total {
            let scn = sample_scenario(&small_ranges(3, 10), 300 + seed).unwrap();
            let (_, best_u) = exhaustive(&scn).unwrap();
            let (_, u) = coordinate_ascent(&scn, &PowerAllocation::zeros(3), 16).unwrap();
            if (best_u - u).abs() <= 1e-9 * best_u.abs().max(1.0) {
                hits += 1;
            }
        }
        assert!(hits >= 95, "ascent matched exhaustive on {hits}/{total}");
    }

    #[test]
    fn exhaustive_is_permutation_consistent() {
        for seed in 0..10 {
            let scn = sample_scenario(&small_ranges(3, 7), 400 + seed).unwrap();
            let (p, u) = exhaustive(&scn).unwrap();
            let perm = [2usize, 0, 1];
            let scn_p = NetworkScenario {
                channel_gain: perm.iter().map(|&i| scn.channel_gain[i].clone()).collect(),
                association: perm.iter().map(|&i| scn.association[i]).collect(),
                ..scn.clone()
            };
            let (pp, up) = exhaustive(&scn_p).unwrap();
            let expected = PowerAllocation {
                levels: perm.iter().map(|&i| p.levels[i]).collect(),
            };
            assert!((u - up).abs() <= 1e-12 * u.abs().max(1.0));
            assert_eq!(pp, expected);
        }
    }
}
