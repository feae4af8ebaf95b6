// pilot: OOD separation measurement for the acceptance thresholds
use uarl::agent::*;
use uarl::data::*;
use uarl::envs::*;
use uarl::gate::*;

fn main() {
    let t0 = std::time::Instant::now();
    let spec = EnvSpec::point_mass(200, DomainParams::new(0.05, 0.0, 1.0));
    let nominal_range = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 1.0]).unwrap();
    let repulsive_range = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 5.0]).unwrap();
    let behavior = PdPointMassPolicy::default();

    for seed in [0u64, 1, 2] {
        let nominal = collect_rollouts(&spec, &nominal_range, &behavior, 200, 1000 + seed, Role::Nominal).unwrap();
        let repulsive = collect_rollouts(&spec, &repulsive_range, &behavior, 200, 2000 + seed, Role::Repulsive).unwrap();
        let cfg = TrainConfig { steps: 3000, seed, eval_every: 1000, ..Default::default() };
        let t1 = std::time::Instant::now();
        let out = train_offline(&nominal, &repulsive, &spec, &cfg).unwrap();
        let train_secs = t1.elapsed().as_secs_f64();

        // calibration: 100 ID episodes
        let calib = collect_rollouts(&spec, &nominal_range, &behavior, 100, 3000 + seed, Role::Nominal).unwrap();
        let id_vars = episode_mean_variances(&out.ensemble, &calib).unwrap();
        let tau = threshold_percentile(&id_vars, 95.0).unwrap();

        // fresh ID (50) and OOD mass=10 (50)
        let fresh = collect_rollouts(&spec, &nominal_range, &behavior, 50, 4000 + seed, Role::Nominal).unwrap();
        let ood_range = ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [10.0, 10.0]).unwrap();
        let ood = collect_rollouts(&spec, &ood_range, &behavior, 50, 5000 + seed, Role::Nominal).unwrap();
        let fresh_vars = episode_mean_variances(&out.ensemble, &fresh).unwrap();
        let ood_vars = episode_mean_variances(&out.ensemble, &ood).unwrap();
        let fresh_above = fresh_vars.iter().filter(|&&v| v > tau).count();
        let ood_above = ood_vars.iter().filter(|&&v| v > tau).count();
        let med = |mut v: Vec<f64>| { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] };
        let final_eval = out.metrics.rows.iter().rev().find_map(|r| r.eval_return);
        let behavior_ret: f64 = {
            let r = nominal.episode_returns();
            r.iter().sum::<f64>() / r.len() as f64
        };
        println!(
            "seed {seed}: train {train_secs:.1}s tau {tau:.4} | ID median {:.4} above {}/50 | OOD median {:.4} above {}/50 | eval {:?} behavior {:.1}",
            med(fresh_vars.clone()), fresh_above, med(ood_vars.clone()), ood_above, final_eval, behavior_ret
        );
        println!("  total {:.1}s", t0.elapsed().as_secs_f64());
    }
}
