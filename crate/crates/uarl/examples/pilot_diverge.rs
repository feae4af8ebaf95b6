// reproduce the finetune divergence at gamma 0.95 with diagnostics
use uarl::agent::*;
use uarl::buffer::*;
use uarl::data::*;
use uarl::ensemble::*;
use uarl::envs::*;
use uarl::nn::Adam;
use uarl::rng::*;

fn main() {
    let spec = EnvSpec::point_mass(200, DomainParams::new(0.05, 0.0, 1.0));
    let nr = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 1.0]).unwrap();
    let rr = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 5.0]).unwrap();
    let behavior = PdPointMassPolicy::default();
    let d0 = collect_rollouts(&spec, &nr, &behavior, 200, child_seed(0, "dataset", 0), Role::Nominal).unwrap();
    let d1 = collect_rollouts(&spec, &rr, &behavior, 200, child_seed(0, "dataset", 1), Role::Repulsive).unwrap();
    let cfg = TrainConfig { steps: 3000, seed: 0, gamma: 0.95, eval_every: 0, ..Default::default() };
    let out = train_offline(&d0, &d1, &spec, &cfg).unwrap();
    eprintln!("initial train done");

    let rr2 = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 10.0]).unwrap();
    let rollout = ActorRolloutPolicy { policy: out.policy.clone(), noise_sigma: 0.1, label: "pi0".into() };
    let d2 = collect_rollouts(&spec, &rr2, &rollout, 200, child_seed(0, "dataset", 2), Role::Repulsive).unwrap();
    let d1n = d1.with_role(Role::Nominal);
    let buffer = merge_balanced(&[&d0, &d1n], &out.ensemble).unwrap();
    eprintln!("buffer built, {} transitions", buffer.len());

    // manual finetune loop with diagnostics
    let mut policy = out.policy;
    let mut ensemble = out.ensemble;
    let ft_seed = child_seed(0, "finetune", 0);
    let mut cfg2 = cfg.clone();
    cfg2.seed = ft_seed;
    let rep_buf = BalancedBuffer::uniform(d2.flatten(), Role::Repulsive).unwrap();
    let mut opts: Vec<Adam> = ensemble.members.iter().map(|m| Adam::new(m.online.n_params(), cfg2.lr)).collect();
    let mut actor_opt = Adam::new(policy.net.n_params(), cfg2.lr);
    let mut rng_nom = stream(cfg2.seed, "batch_nominal", 0);
    let mut rng_rep = stream(cfg2.seed, "batch_repulsive", 0);
    let mut rng_tn = stream(cfg2.seed, "target_noise", 0);
    let mut rng_dn = stream(cfg2.seed, "diversity_noise", 0);
    let mut lambda = 0.0;
    for step in 0..3000usize {
        let nb = buffer.sample_batch(cfg2.batch_size, &mut rng_nom);
        let y = td_targets(&nb, &policy, &ensemble, cfg2.gamma, cfg2.policy_noise, cfg2.noise_clip, &mut rng_tn);
        let rb = rep_buf.sample_batch(cfg2.batch_size, &mut rng_rep);
        let na = smoothed_next_actions(&policy, &rb, cfg2.policy_noise, cfg2.noise_clip, &mut rng_dn);
        // inline lambda refresh
        if step % 100 == 0 {
            let mut rl_s = 0.0; let mut dv_s = 0.0;
            for m in &ensemble.members {
                let (q, _) = m.online.forward_batch(&nb.sa_input(), nb.n);
                rl_s += q.iter().zip(&y).map(|(a,b)| (a-b)*(a-b)).sum::<f64>() / nb.n as f64;
                dv_s += diversity_value(&m.online, &rb, &na, cfg2.delta, cfg2.gamma).unwrap() / rb.n as f64;
            }
            let (rl_m, dv_m) = (rl_s / 4.0, dv_s / 4.0);
            lambda = adaptive_lambda(rl_m, dv_m, cfg2.lambda_fraction, lambda);
            println!("step {step}: rl {rl_m:.3e} div {dv_m:.3e} lambda {lambda:.3e}");
        }
        let rep = update_critics(&mut ensemble, &nb, Some((&rb, &na)), &y, lambda, &cfg2, &mut opts, step);
        match rep {
            Ok(r) => {
                if step % 300 == 0 {
                    let pmax = ensemble.members[0].online.params().iter().fold(0.0f64, |m,v| m.max(v.abs()));
                    println!("  step {step}: rl {:.3e} div {:.3e} maxparam {pmax:.2e}", r.rl, r.div);
                }
            }
            Err(e) => { println!("DIVERGED at {step}: {e}"); return; }
        }
        if (step + 1) % 2 == 0 {
            update_actor(&mut policy, &ensemble, &nb, cfg2.bc_alpha, &mut actor_opt);
            soft_update_targets(&mut ensemble, cfg2.polyak);
        }
    }
    println!("finetune survived");
}
