mod common;

use std::sync::Arc;

use common::*;
use gfnrom::bounds::{infinity_norm, verify_bounds, BoundSample};
use gfnrom::datagen::{analytic_field, Family};
use gfnrom::rom::{Architecture, RomModel};
use gfnrom::Mesh;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(family: Family, rng: &mut ChaCha8Rng, m_o: &Mesh, m_n: &Mesh, n: usize) -> Vec<BoundSample> {
    (0..n)
        .map(|_| {
            let mu: Vec<f64> = family.bounds().iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
            BoundSample {
                u_old: analytic_field(family, &mu, m_o).unwrap(),
                u_new: analytic_field(family, &mu, m_n).unwrap(),
                mu,
            }
        })
        .collect()
}

fn family_from(i: u8) -> Family {
    [Family::Smooth, Family::BoundaryLayer, Family::Bump, Family::Multimode][i as usize % 4]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    // The inequalities hold for any weights, trained or not.
    #[test]
    fn bounds_hold_for_random_models(
        seed in any::<u64>(),
        fam in 0u8..4,
        n_o in 5usize..60,
        n_n in 5usize..80,
        nested in any::<bool>(),
        hidden in 0usize..=2,
    ) {
        let family = family_from(fam);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m_o, m_n) = if nested {
            let fine = random_mesh(&mut rng, n_o + n_n, 2, false);
            (random_subset(&mut rng, &fine, n_o), fine)
        } else {
            (random_mesh(&mut rng, n_o, 2, false), random_mesh(&mut rng, n_n, 2, false))
        };
        let arch = Architecture {
            width: 6,
            latent_dim: Some(3),
            encoder_hidden: vec![4; hidden],
            mapper_hidden: vec![5],
        };
        let model = RomModel::new(m_o.clone(), family.n_params(), &arch, 10.0, seed).unwrap();
        let s = samples(family, &mut rng, &m_o, &m_n, 8);
        let report = verify_bounds(&model, &s, &m_n).unwrap();
        for c in report.checks() {
            prop_assert!(c.pass, "{} violated: max lhs {} min rhs {}", c.bound, c.max_lhs, c.min_rhs);
        }
    }

    #[test]
    fn infinity_norm_matches_definition(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Array2<f64> = random_matrix(&mut rng, rows, cols);
        let mut best = 0.0f64;
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..cols {
                s += w[[r, c]].abs();
            }
            best = best.max(s);
        }
        prop_assert!((infinity_norm(&w) - best).abs() <= 1e-15 * best.max(1.0));
    }
}

#[test]
fn closer_mesh_never_raises_the_right_hand_sides() {
    let m_o = Arc::new(Mesh::from_1d(&[0.0, 0.5, 1.0]).unwrap());
    let near = Arc::new(Mesh::from_1d(&[0.0, 0.05, 0.5, 0.55, 1.0]).unwrap());
    let far = Arc::new(Mesh::from_1d(&[0.0, 0.2, 0.5, 0.7, 1.0]).unwrap());
    let arch = Architecture {
        width: 4,
        latent_dim: Some(2),
        encoder_hidden: vec![3],
        mapper_hidden: vec![4],
    };
    let model = RomModel::new(m_o.clone(), 1, &arch, 10.0, 5).unwrap();
    let field = |a: f64, m: &Mesh| -> Vec<f64> { m.nodes().map(|x| (a * x[0]).sin()).collect() };
    let make = |m: &Mesh| -> Vec<BoundSample> {
        [0.5, 1.0, 2.0]
            .iter()
            .map(|&a| BoundSample {
                mu: vec![a],
                u_old: field(a, &m_o),
                u_new: field(a, m),
            })
            .collect()
    };
    let r_near = verify_bounds(&model, &make(&near), &near).unwrap();
    let r_far = verify_bounds(&model, &make(&far), &far).unwrap();
    assert!(r_near.delta <= r_far.delta);
    for (a, b) in r_near.samples.iter().zip(&r_far.samples) {
        assert!(a.rom_rhs <= b.rom_rhs);
        assert!(a.mapper_rhs <= b.mapper_rhs);
        assert!(a.autoencoder_rhs <= b.autoencoder_rhs);
    }
    assert!(r_near.pass() && r_far.pass());
}
