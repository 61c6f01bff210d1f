mod common;

use common::*;
use gfnrom::rom::{Architecture, RomModel, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(seed: u64) -> (RomModel, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=2);
    let n_model = rng.gen_range(2..=12);
    let model_mesh = random_mesh(&mut rng, n_model, dim, false);
    let n_params = rng.gen_range(1..=3);
    let arch = Architecture {
        width: rng.gen_range(1..=4),
        latent_dim: Some(rng.gen_range(1..=4)),
        encoder_hidden: (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..=4)).collect(),
        mapper_hidden: (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(1..=5)).collect(),
    };
    let omega = rng.gen_range(0.5..10.0);
    let mut model = RomModel::new(model_mesh.clone(), n_params, &arch, omega, seed).unwrap();
    // nonzero biases so every path is exercised
    for (v, is_weight) in model.param_slices_mut() {
        if !is_weight {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
    }
    let mut samples = Vec::new();
    for k in 0..3 {
        let mesh = if k == 0 {
            model_mesh.clone()
        } else {
            let n = rng.gen_range(1..=12);
            random_mesh(&mut rng, n, dim, false)
        };
        samples.push(Sample {
            mu: (0..n_params).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            u: (0..mesh.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mesh,
        });
    }
    (model, samples)
}

fn perturbed_loss(model: &RomModel, samples: &[Sample], slot: usize, i: usize, h: f64) -> f64 {
    let mut m = model.clone();
    m.param_slices_mut()[slot].0[i] += h;
    m.total_loss(samples).unwrap().total
}

#[test]
fn analytic_gradients_match_central_differences() {
    let h = 1e-5;
    let mut checked = 0;
    for seed in 0..50 {
        let (model, samples) = random_case(seed);
        assert!(samples.iter().skip(1).any(|s| !s.mesh.same_nodes(model.mesh())));
        let (_, grad) = model.loss_and_gradient(&samples).unwrap();
        let analytic = grad.slices();
        for (slot, g) in analytic.iter().enumerate() {
            for (i, &a) in g.iter().enumerate() {
                let fd = (perturbed_loss(&model, &samples, slot, i, h) - perturbed_loss(&model, &samples, slot, i, -h))
                    / (2.0 * h);
                let tol = 1e-5 * a.abs().max(fd.abs()) + 1e-8;
                assert!(
                    (a - fd).abs() <= tol,
                    "seed {seed} slot {slot} index {i}: analytic {a} vs finite difference {fd}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn perfect_fit_has_zero_gradient() {
    let (mut model, mut samples) = random_case(7);
    for (v, _) in model.param_slices_mut() {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    model.bundle.b_dec.fill(0.25);
    for s in &mut samples {
        s.u = vec![0.25; s.mesh.len()];
    }
    let (loss, grad) = model.loss_and_gradient(&samples).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(grad.slices().iter().all(|g| g.iter().all(|&x| x == 0.0)));
}
