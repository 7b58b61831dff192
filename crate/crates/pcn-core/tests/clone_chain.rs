//! Cross-checks of the configurable clone network against the longhand
//! sequential composition in `pcn_core::testing`, plus the weight-sharing
//! identity: the shared-parameter gradient must equal the sum of per-clone
//! gradients taken with untied copies of the same parameters.

use pcn_core::net::{
    denoise_all_clones, network_backward, network_forward, network_loss, CloneNetConfig,
    LossMode, ModuleTopology, ParameterSet,
};
use pcn_core::testing::{max_rel_err, scn_compose_forward, scn_unshared_backward, seeded_grid};

fn flatten(set: &ParameterSet<f64>) -> Vec<f64> {
    set.slices().into_iter().flatten().copied().collect()
}

#[test]
fn sequential_chain_matches_the_longhand_composition() {
    for (n_layers, side) in [(2usize, 8usize), (4, 11), (6, 15)] {
        let topology = ModuleTopology::standard(n_layers, 3);
        for n_clones in [1usize, 2, 3, 5] {
            for seed in 0..3u64 {
                let config = CloneNetConfig::sequential(n_clones, topology.clone());
                let params = ParameterSet::<f64>::init(&config, 1000 + seed);
                let y = seeded_grid::<f64>([2, 1, side, side], 2000 + seed, 0.0, 1.0);

                let (outputs, _) = network_forward(&y, &config, &params).unwrap();
                let thetas: Vec<_> = (0..n_clones).map(|_| params.clone()).collect();
                let reference = scn_compose_forward(&y, &thetas, &topology);

                assert_eq!(outputs.len(), reference.len());
                for (t, (a, b)) in outputs.iter().zip(&reference).enumerate() {
                    let worst = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0f64, f64::max);
                    assert!(
                        worst <= 1e-12,
                        "clone {t}, layers {n_layers}, T {n_clones}, seed {seed}: max abs diff {worst:e}"
                    );
                }

                let all = denoise_all_clones(&y, &config, &params).unwrap();
                assert_eq!(all, outputs);
            }
        }
    }
}

#[test]
fn shared_gradient_is_the_sum_of_unshared_clone_gradients() {
    let topology = ModuleTopology::standard(4, 3);
    for n_clones in [1usize, 2, 4] {
        for seed in 0..3u64 {
            let config = CloneNetConfig::sequential(n_clones, topology.clone());
            let params = ParameterSet::<f64>::init(&config, 300 + seed);
            let y = seeded_grid::<f64>([1, 1, 12, 12], 400 + seed, 0.0, 1.0);
            let target = seeded_grid::<f64>([1, 1, 12, 12], 500 + seed, 0.0, 1.0);

            let (outputs, trace) = network_forward(&y, &config, &params).unwrap();
            let (loss, out_grads) = network_loss(&outputs, &target, LossMode::LastOnly).unwrap();
            let shared = network_backward(&trace, &out_grads, &config, &params).unwrap();

            let thetas: Vec<_> = (0..n_clones).map(|_| params.clone()).collect();
            let (oracle_loss, per_clone) =
                scn_unshared_backward(&y, &thetas, &topology, &target);
            assert!((loss - oracle_loss).abs() <= 1e-15 * loss.abs().max(1.0));

            let mut summed = flatten(&per_clone[0]);
            for g in &per_clone[1..] {
                for (acc, v) in summed.iter_mut().zip(flatten(g)) {
                    *acc += v;
                }
            }
            let err = max_rel_err(&flatten(&shared), &summed, 1e-10);
            assert!(
                err <= 1e-10,
                "T {n_clones}, seed {seed}: shared vs summed mismatch {err:e}"
            );
        }
    }
}

#[test]
fn every_clone_count_collapses_to_one_module_at_t1() {
    // With a single clone the sequential and parallel variants describe the
    // same computation; outputs and losses must agree exactly.
    let topology = ModuleTopology::standard(4, 2);
    let y = seeded_grid::<f64>([1, 1, 11, 11], 9, 0.0, 1.0);
    let target = seeded_grid::<f64>([1, 1, 11, 11], 10, 0.0, 1.0);
    let seq = CloneNetConfig::sequential(1, topology.clone());
    let par = CloneNetConfig::parallel(1, topology.clone());

    let params_seq = ParameterSet::<f64>::init(&seq, 77);
    let (out_seq, trace_seq) = network_forward(&y, &seq, &params_seq).unwrap();
    let (loss_seq, g_seq) = network_loss(&out_seq, &target, seq.loss_mode).unwrap();

    // The parallel flagship uses feature transfer, so its parameters differ in
    // shape; what must coincide at T = 1 is the loss rule, not the weights.
    let (loss_par_rule, g_par_rule) = network_loss(&out_seq, &target, LossMode::Parallel).unwrap();
    assert_eq!(loss_seq.to_bits(), loss_par_rule.to_bits());
    assert_eq!(g_seq[0], g_par_rule[0]);

    let params_par = ParameterSet::<f64>::init(&par, 78);
    let (out_par, _) = network_forward(&y, &par, &params_par).unwrap();
    assert_eq!(out_par.len(), 1);
    let _ = trace_seq;
}

#[test]
fn undersized_inputs_are_rejected_at_every_depth() {
    for n_layers in [2usize, 4, 6, 10] {
        let topology = ModuleTopology::standard(n_layers, 2);
        let config = CloneNetConfig::sequential(2, topology);
        let params = ParameterSet::<f64>::zeros(&config);
        let s = config.min_image_side();

        let ok = seeded_grid::<f64>([1, 1, s, s], 1, 0.0, 1.0);
        assert!(network_forward(&ok, &config, &params).is_ok(), "side {s}");

        let bad = seeded_grid::<f64>([1, 1, s - 1, s - 1], 1, 0.0, 1.0);
        let err = network_forward(&bad, &config, &params).unwrap_err().to_string();
        assert!(err.contains(&format!("{s}x{s}")), "depth {n_layers}: {err}");
    }
}
