use ctrldiffuse::approx_mdp::{bellman_residual, estimate_finite_mdp, greedy_policy, q_value_iteration};
use ctrldiffuse::diffusion::{discounted_cost_estimate, Interval};
use ctrldiffuse::discretize::{build_action_grid, build_uniform_state_grid};
use ctrldiffuse::policy_eval::evaluate_learned_control;
use ctrldiffuse::qlearn::{run_q_learning, run_q_learning_on_mdp, LearnConfig};
use ctrldiffuse::{bounds, rng, DiffusionModel, OuParams, SamplingScheme};

fn ou() -> DiffusionModel {
    DiffusionModel::ornstein_uhlenbeck(
        OuParams::new(1.0, 0.5, 0.1).unwrap(),
        Interval::new(-2.0, 2.0).unwrap(),
        Interval::new(-1.0, 1.0).unwrap(),
        1.0,
    )
    .unwrap()
}

#[test]
fn q_learning_on_estimated_mdp_reaches_value_iteration() {
    let model = ou();
    let h = 0.5;
    let states = build_uniform_state_grid(-2.0, 2.0, 6).unwrap();
    let actions = build_action_grid(-1.0, 1.0, 3).unwrap();
    let scheme = SamplingScheme::new(h, 20, 1).unwrap();
    let mdp = estimate_finite_mdp(&model, &states, &actions, &scheme, 2000).unwrap().mdp;
    let q_star = q_value_iteration(&mdp, 1e-10, 100_000).unwrap();

    let mut cfg = LearnConfig::new(1_000_000);
    cfg.reference_q = Some(&q_star);
    cfg.reference_mdp = Some(&mdp);
    let out = run_q_learning_on_mdp(&mdp, &cfg, &mut rng::master(2)).unwrap();
    let last = out.history.last().unwrap();
    let scale = bounds::v_max(h, model.cost_bound_c, model.discount_beta).unwrap();
    assert!(last.sup_distance < 0.05 * scale, "{} vs V_max {scale}", last.sup_distance);

    // Distance to Q* shrinks over the run.
    let first = out.history.checkpoints.iter().find(|c| c.step >= 1000).unwrap();
    assert!(last.sup_distance < first.sup_distance);
    assert!(bellman_residual(&mdp, &out.table.to_qmatrix()).unwrap() <= 2.0 * last.sup_distance + 1e-12);
}

#[test]
fn learned_values_stay_within_v_max() {
    let model = ou();
    let h = 0.2;
    let states = build_uniform_state_grid(-2.0, 2.0, 10).unwrap();
    let actions = build_action_grid(-1.0, 1.0, 3).unwrap();
    let scheme = SamplingScheme::new(h, 10, 3).unwrap();
    let v_max = bounds::v_max(h, model.cost_bound_c, model.discount_beta).unwrap();
    for q_init in [0.0, v_max] {
        let mut cfg = LearnConfig::new(100_000);
        cfg.q_init = q_init;
        let out = run_q_learning(&model, &states, &actions, &scheme, &cfg, &mut rng::master(4)).unwrap();
        for c in &out.history.checkpoints {
            assert!(c.q_min >= 0.0 && c.q_max <= v_max, "step {}: [{}, {}]", c.step, c.q_min, c.q_max);
        }
    }
}

#[test]
fn solved_control_beats_doing_nothing() {
    let model = ou();
    let h = 0.2;
    let states = build_uniform_state_grid(-2.0, 2.0, 16).unwrap();
    let actions = build_action_grid(-1.0, 1.0, 5).unwrap();
    let mdp = estimate_finite_mdp(&model, &states, &actions, &SamplingScheme::new(h, 10, 5).unwrap(), 2000)
        .unwrap()
        .mdp;
    let policy = greedy_policy(&q_value_iteration(&mdp, 1e-9, 100_000).unwrap());
    let eval = SamplingScheme::new(h, 20, 6).unwrap();
    let solved = evaluate_learned_control(&model, &states, &actions, &policy, 1.0, &eval, 4000, 80).unwrap();
    let idle = discounted_cost_estimate(&model, &|_: usize, _: f64| 0.0, 1.0, &eval, 4000, 80, None).unwrap();
    let se = (solved.std_error.powi(2) + idle.std_error.powi(2)).sqrt();
    assert!(solved.estimate < idle.estimate - 4.0 * se, "{} vs {}", solved.estimate, idle.estimate);
}

#[test]
fn single_precision_pipeline_agrees_with_double() {
    let model32 = ctrldiffuse::diffusion::DiffusionModel::<f32>::ornstein_uhlenbeck(
        ctrldiffuse::diffusion::OuParams::new(1.0, 0.5, 0.1).unwrap(),
        ctrldiffuse::diffusion::Interval::new(-2.0, 2.0).unwrap(),
        ctrldiffuse::diffusion::Interval::new(-1.0, 1.0).unwrap(),
        1.0,
    )
    .unwrap();
    let model64 = ou();
    let s32 = build_uniform_state_grid(-2.0f32, 2.0, 8).unwrap();
    let a32 = build_action_grid(-1.0f32, 1.0, 3).unwrap();
    let s64 = build_uniform_state_grid(-2.0, 2.0, 8).unwrap();
    let a64 = build_action_grid(-1.0, 1.0, 3).unwrap();
    let q32 = q_value_iteration(
        &estimate_finite_mdp(&model32, &s32, &a32, &ctrldiffuse::diffusion::SamplingScheme::new(0.5f32, 10, 8).unwrap(), 20_000).unwrap().mdp,
        1e-5,
        10_000,
    )
    .unwrap();
    let q64 = q_value_iteration(
        &estimate_finite_mdp(&model64, &s64, &a64, &SamplingScheme::new(0.5, 10, 8).unwrap(), 20_000).unwrap().mdp,
        1e-9,
        10_000,
    )
    .unwrap();
    // The two precisions draw different normals, so they agree up to
    // Monte Carlo error of the kernel estimate.
    for (a, b) in q32.values().iter().zip(q64.values()) {
        assert!((*a as f64 - b).abs() < 3e-2 * b.abs().max(1e-3), "{a} vs {b}");
    }
}
