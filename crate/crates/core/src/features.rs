//! Shared featurizations. Both value-based agents and the inverse-dynamics
//! head see the same state encoding so method comparisons isolate the
//! learning algorithm, not the inputs.

use crate::env::{NetworkScenario, PowerAllocation};

pub const ENV_FEATURE_DIM: usize = 5;

/// Width of [`state_features`] for a scenario: I + I*J + 1.
pub fn state_feature_dim(scn: &NetworkScenario) -> usize {
    scn.num_users + scn.num_users * scn.num_base_stations + 1
}

/// Normalized power levels, log10 channel gains row-major, log10 noise.
pub fn state_features(scn: &NetworkScenario, p: &PowerAllocation) -> Vec<f64> {
    let mut out = Vec::with_capacity(state_feature_dim(scn));
    let pmax = scn.power_levels as f64;
    out.extend(p.levels.iter().map(|&l| l as f64 / pmax));
    for row in &scn.channel_gain {
        out.extend(row.iter().map(|g| g.log10()));
    }
    out.push(scn.noise_power.log10());
    out
}

/// Scenario summary for condition labels: mean/std/min/max of log10 gains
/// plus log10 noise. Std is the population form.
pub fn env_summary_features(scn: &NetworkScenario) -> Vec<f64> {
    let logs: Vec<f64> = scn
        .channel_gain
        .iter()
        .flatten()
        .map(|g| g.log10())
        .collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    vec![mean, var.sqrt(), min, max, scn.noise_power.log10()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_scenario, ScenarioRanges};

    #[test]
    fn state_features_layout() {
        let scn = sample_scenario(
            &ScenarioRanges {
                num_users: 3,
                num_base_stations: 2,
                power_levels: 8,
                ..ScenarioRanges::default()
            },
            1,
        )
        .unwrap();
        let p = PowerAllocation {
            levels: vec![0, 4, 8],
        };
        let f = state_features(&scn, &p);
        assert_eq!(f.len(), state_feature_dim(&scn));
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.5);
        assert_eq!(f[2], 1.0);
        assert_eq!(f[3], scn.channel_gain[0][0].log10());
        assert_eq!(*f.last().unwrap(), scn.noise_power.log10());
    }

    #[test]
    fn env_summary_is_five_wide_and_finite() {
        let scn = sample_scenario(&ScenarioRanges::default(), 2).unwrap();
        let f = env_summary_features(&scn);
        assert_eq!(f.len(), ENV_FEATURE_DIM);
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(f[2] <= f[0] && f[0] <= f[3]);
    }

    #[test]
    fn uniform_gains_have_zero_spread() {
        let ranges = ScenarioRanges {
            gain_low: 2.0,
            gain_high: 2.0,
            ..ScenarioRanges::default()
        };
        let scn = sample_scenario(&ranges, 3).unwrap();
        let f = env_summary_features(&scn);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[0], f[2]);
        assert_eq!(f[0], f[3]);
    }
}
