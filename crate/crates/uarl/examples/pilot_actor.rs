// actor quality diagnostic: backbone-only training, policy vs data actions
use uarl::agent::*;
use uarl::data::*;
use uarl::envs::*;

fn main() {
    let spec = EnvSpec::point_mass(200, DomainParams::new(0.05, 0.0, 1.0));
    let nr = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 1.0]).unwrap();
    let behavior = PdPointMassPolicy::default();
    let nominal = collect_rollouts(&spec, &nr, &behavior, 200, 1000, Role::Nominal).unwrap();
    let behavior_ret = nominal.episode_returns().iter().sum::<f64>() / 200.0;

    for steps in [1000usize, 3000] {
        let cfg = TrainConfig { steps, seed: 0, eval_every: 0, ..Default::default() };
        let out = train_backbone(&nominal, &spec, &cfg).unwrap();
        let eval = evaluate_policy(&out.policy, &spec, &spec.nominal_params, 5, 99).unwrap();
        // compare policy vs data actions on a few states
        let mut mse = 0.0; let mut n = 0;
        for t in nominal.transitions().take(500) {
            let a = out.policy.act(&t.state);
            mse += (a[0]-t.action[0]).powi(2) + (a[1]-t.action[1]).powi(2);
            n += 1;
        }
        println!("steps {steps}: eval {eval:.1} behavior {behavior_ret:.1} bc_mse_on_data {:.4}", mse / n as f64);
        // trace one eval episode
        if steps == 3000 {
            let mut env = make_env(&spec, &spec.nominal_params, 123).unwrap();
            let mut s = env.reset();
            for i in 0..200 {
                let a = out.policy.act(&s);
                let r = env.step(&a).unwrap();
                if i % 40 == 0 {
                    println!("  t {i}: pos ({:.2},{:.2}) v ({:.2},{:.2}) a ({:.2},{:.2}) r {:.3}", s[0], s[1], s[2], s[3], a[0], a[1], r.reward);
                }
                s = r.next_state;
            }
        }
    }
}
