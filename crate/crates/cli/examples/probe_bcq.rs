use diffalloc_core::bcq::BcqAgent;
use diffalloc_core::env::{AdjustAction, EpisodeRunner, NetworkScenario, PowerAllocation};
use diffalloc_core::features::state_features;
use diffalloc_core::nn::softmax;

fn main() {
    let scn = NetworkScenario::load("fixtures/two_user.toml".as_ref()).unwrap();
    let mut agent = BcqAgent::load("runs/two_user/bcq/u2".as_ref()).unwrap();
    for tau in [0.05, 0.1, 0.3, 0.5, 0.7, 0.9] {
        agent.config.tau = tau;
        let ret = diffalloc_core::bcq::greedy_return(&agent, &scn, 80).unwrap();
        println!("tau={tau} greedy_return={ret}");
    }
    agent.config.tau = 0.3;
    let mut runner =
        EpisodeRunner::new(scn.clone(), PowerAllocation::zeros(2), 80).unwrap();
    let mut t = 0;
    while !runner.done() {
        let feats = state_features(&scn, &runner.state);
        let a = agent.act(&feats);
        if t % 8 == 0 || t < 6 {
            let probs = softmax(&agent.behavior.forward_one(&feats));
            let q = agent.q.forward_one(&feats);
            println!(
                "t={t:2} state={:?} a={a} probs={:?} q={:?}",
                runner.state.levels,
                probs.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
                q.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            );
        }
        runner.step(AdjustAction::from_index(a, 2).unwrap()).unwrap();
        t += 1;
    }
    println!(
        "final state {:?} utility {}",
        runner.state.levels,
        runner.current_utility()
    );
}
