// timing probe for one training phase with rayon member-parallelism
use uarl::agent::*;
use uarl::data::*;
use uarl::envs::*;

fn main() {
    let spec = EnvSpec::point_mass(200, DomainParams::new(0.05, 0.0, 1.0));
    let nr = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 1.0]).unwrap();
    let rr = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 5.0]).unwrap();
    let behavior = PdPointMassPolicy::default();
    let nominal = collect_rollouts(&spec, &nr, &behavior, 200, 1000, Role::Nominal).unwrap();
    let repulsive = collect_rollouts(&spec, &rr, &behavior, 200, 2000, Role::Repulsive).unwrap();
    let cfg = TrainConfig { steps: 1000, seed: 0, eval_every: 0, ..Default::default() };
    let t = std::time::Instant::now();
    let out = train_offline(&nominal, &repulsive, &spec, &cfg).unwrap();
    println!("1000 steps: {:.1}s, last rl {:.5}", t.elapsed().as_secs_f64(), out.metrics.rows.last().unwrap().rl_loss);
}
