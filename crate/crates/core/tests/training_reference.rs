//! Training-loop checks against the analytically solvable quadratic well.

use eigenpde::network::NetworkArchitecture;
use eigenpde::potentials::PotentialSpec;
use eigenpde::sampling::euler_maruyama;
use eigenpde::training::{train, TrainConfig};

#[test]
fn quadratic_training_recovers_first_eigenvalue() {
    // Boltzmann measure of 2|x|^2 at beta = 1 has spectrum 4, 4, 8, ...; a
    // single trained network must land on the first eigenvalue.
    let pot = PotentialSpec::builtin("quadratic2d", None, 1.0).unwrap();
    let data = euler_maruyama(&pot, &[0.0, 0.0], 1e-3, 1_000_000, 2024, 0).unwrap();
    let arch = NetworkArchitecture::new(vec![2, 20, 20, 20, 1]).unwrap();
    let config = TrainConfig {
        steps: 3000,
        batch_size: 2000,
        eval_batch_size: 2000,
        learning_rate: 5e-3,
        seed: 1,
        final_phase_steps: 100,
        ..TrainConfig::new(1, vec![1.0], 20.0)
    };
    let out = train(&config, &arch, &data, &pot).unwrap();
    assert!(
        (out.lambda_mean[0] - 4.0).abs() <= 0.4,
        "lambda_1 = {} +- {}",
        out.lambda_mean[0],
        out.lambda_std[0]
    );
    // The constraint must be essentially satisfied at the end.
    let tail = &out.penalty_trace[out.penalty_trace.len() - 100..];
    let avg = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(avg < 0.05, "penalty tail {avg}");
}
