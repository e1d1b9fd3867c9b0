// Scratch calibration probe (not part of the deliverable).
use fractalfit::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let rcfg = RenderConfig::new(32, 32, 1.0);
    let images = read_idx_images("/root/crate/crates/cli/tests/fixtures/digits-images-idx3-ubyte")
        .unwrap();

    let t0 = Instant::now();
    let mut means = [0.0f64; 3];
    let n_digits = 6usize;
    for idx in 0..n_digits {
        let target = fractalfit::io::prepare_target(
            &images.image(idx),
            32,
            32,
            0.5,
            format!("digit{idx}"),
        );
        let mut results = Vec::new();
        for (ci, (objective, noise)) in [
            (Objective::Expectation, true),  // F
            (Objective::Expectation, false), // E
            (Objective::Fixed, false),       // D
        ]
        .iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + idx as u64);
            let init = FractalSystem::random(10, &mut rng);
            let cfg = OptimizerConfig {
                objective: *objective,
                noise_enabled: *noise,
                seed: 2000 + idx as u64,
                ..OptimizerConfig::default()
            };
            let r = fit(&init, &target.canvas, &cfg, &rcfg).unwrap();
            let mut eval_rng = ChaCha8Rng::seed_from_u64(3000 + idx as u64);
            let min_mse =
                evaluate_min_mse(&r.learned, &target.canvas, 100, 300, &rcfg, &mut eval_rng)
                    .unwrap();
            means[ci] += min_mse;
            results.push(min_mse);
        }
        println!(
            "digit {idx}: F {:.4}  E {:.4}  D {:.4}",
            results[0], results[1], results[2]
        );
    }
    println!(
        "means over {n_digits} digits: F {:.4}  E {:.4}  D {:.4}  ({:.0?})",
        means[0] / n_digits as f64,
        means[1] / n_digits as f64,
        means[2] / n_digits as f64,
        t0.elapsed()
    );
}
