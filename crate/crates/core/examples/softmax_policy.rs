//! Log-probabilities, sampling and the score-function gradient of a
//! softmax-linear policy, checked against finite differences.

use mgrpo::policy::SoftmaxLinearPolicy;
use mgrpo::trajectory::{PolicyParams, Role, Step, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mgrpo::Result<()> {
    let (fd, v) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta: Vec<f64> = (0..fd * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pi = SoftmaxLinearPolicy::new(
        PolicyParams {
            role: Role::Sub,
            theta,
            version: 0,
        },
        fd,
        v,
    )?;

    let state = [1.0, 0.5, -0.25];
    let lp = pi.action_logprobs(&state)?;
    println!(
        "action probabilities {:?}",
        lp.iter().map(|x| x.exp()).collect::<Vec<_>>()
    );

    let mut t = Trajectory::new(Role::Sub);
    for _ in 0..3 {
        let (a, blp) = pi.sample_action(&state, &mut rng)?;
        t.steps.push(Step {
            state: state.to_vec(),
            action: a as u32,
            behavior_logprob: blp,
            reward: 0.0,
        });
    }
    println!(
        "sampled actions {:?}, log-likelihood {:.4}",
        t.steps.iter().map(|s| s.action).collect::<Vec<_>>(),
        pi.sequence_logprob(&t)?
    );

    let g = pi.grad_sequence_logprob(&t)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..g.len() {
        let bump = |d: f64| -> mgrpo::Result<f64> {
            let mut p = pi.params.clone();
            p.theta[j] += d;
            pi.with_params(p)?.sequence_logprob(&t)
        };
        let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / fd.abs().max(1e-8));
    }
    println!("largest relative error against central differences: {worst:.2e}");
    Ok(())
}
