//! Invariants checked over random inputs.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use rick_core::adversarial::{d_loss_value, g_loss_value, GenLoss};
use rick_core::evaluation::{
    frechet_gaussian, incompatible_mass, intra_diversity, kid_mmd, nearest_neighbor, poly_kernel,
    DistanceProxy, GaussianFit, ModeLabel, ModeSpec,
};
use rick_core::importance::{quantile_ranks, ImportanceAccumulator};
use rick_core::models::{build_filter_layout, Arch, Gan, GradSource, NetworkId};
use rick_core::rng::{stream, Stream};
use rick_core::scheduler::{cumulative_target, Assignment, MemoryBank};
use rick_core::tensor::Tensor;

fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| {
        let a = DMatrix::from_row_slice(d, d, &v);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    })
}

fn fit(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianFit {
    GaussianFit::new(DVector::from_vec(mean), cov, 10).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fisher_ignores_gradient_sign(grads in prop::collection::vec(-5.0..5.0f64, 1..4 * 15), flips in any::<u64>()) {
        let mut gan = Gan::with_width(Arch::PointMlp, 2, 3, &mut stream(0, Stream::Init));
        let layout = build_filter_layout(&gan);
        let active = vec![true; layout.len()];
        let mut plain = ImportanceAccumulator::new(&layout, NetworkId::Generator, GradSource::Weights);
        let mut flipped = plain.clone();
        let n = gan.generator.num_params();
        for (s, chunk) in grads.chunks(7).enumerate() {
            let g: Vec<f64> = (0..n).map(|i| chunk[i % chunk.len()] * (1.0 + i as f64 * 0.01)).collect();
            let neg: Vec<f64> = g.iter().enumerate()
                .map(|(i, v)| if (flips >> ((i + s) % 64)) & 1 == 1 { -v } else { *v })
                .collect();
            for (acc, grad) in [(&mut plain, &g), (&mut flipped, &neg)] {
                for l in &mut gan.generator.layers {
                    l.weight.clear_grad();
                    l.bias.clear_grad();
                }
                gan.generator.add_flat_grads(grad).unwrap();
                acc.accumulate(&gan.generator, &active).unwrap();
            }
        }
        let a = plain.finalize_fisher(1, &active).unwrap();
        let b = flipped.finalize_fisher(1, &active).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantiles_lie_in_unit_interval_and_preserve_order(v in prop::collection::vec(-1e3..1e3f64, 1..60)) {
        let q = quantile_ranks(&v);
        for i in 0..v.len() {
            prop_assert!((0.0..1.0).contains(&q[i]));
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(q[i] < q[j]);
                }
                if v[i] == v[j] {
                    prop_assert_eq!(q[i], q[j]);
                }
            }
        }
    }

    #[test]
    fn d_loss_mirror_symmetry(r in prop::collection::vec(0.01..0.99f64, 1..16), f in prop::collection::vec(0.01..0.99f64, 1..16)) {
        let mirror_r: Vec<f64> = f.iter().map(|x| 1.0 - x).collect();
        let mirror_f: Vec<f64> = r.iter().map(|x| 1.0 - x).collect();
        let a = d_loss_value(&r, &f);
        let b = d_loss_value(&mirror_r, &mirror_f);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn generator_loss_falls_as_discriminator_is_fooled(p in 0.01..0.98f64, dp in 1e-3..0.01f64) {
        for kind in [GenLoss::NonSaturating, GenLoss::Saturating] {
            prop_assert!(g_loss_value(&[p + dp], kind) < g_loss_value(&[p], kind));
        }
    }

    #[test]
    fn frechet_symmetric_and_zero_on_self(
        m1 in prop::collection::vec(-5.0..5.0f64, 3),
        m2 in prop::collection::vec(-5.0..5.0f64, 3),
        c1 in spd(3),
        c2 in spd(3),
    ) {
        let a = fit(m1, c1);
        let b = fit(m2, c2);
        let ab = frechet_gaussian(&a, &b).unwrap();
        let ba = frechet_gaussian(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0), "{} vs {}", ab, ba);
        prop_assert!(frechet_gaussian(&a, &a).unwrap() <= 1e-9);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn incompatible_mass_ignores_sample_order(pts in points(40, 2), seed in any::<u64>()) {
        let modes = ModeSpec::new(
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]],
            vec![ModeLabel::Shared, ModeLabel::SourceOnly, ModeLabel::TargetOnly],
        ).unwrap();
        let mut shuffled = pts.clone();
        let mut rng = stream(seed, Stream::Probe);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = incompatible_mass(&tensor(&pts), &modes).unwrap();
        let b = incompatible_mass(&tensor(&shuffled), &modes).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn kid_matches_double_sum(x in points(12, 3), y in points(9, 3)) {
        let within = |s: &[Vec<f64>]| {
            let mut t = 0.0;
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if i != j { t += poly_kernel(&s[i], &s[j]); }
                }
            }
            t / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for a in &x { for b in &y { cross += poly_kernel(a, b); } }
        let brute = within(&x) + within(&y) - 2.0 * cross / (x.len() * y.len()) as f64;
        let got = kid_mmd(&tensor(&x), &tensor(&y)).unwrap() / 1e3;
        prop_assert!((got - brute).abs() <= 1e-12 * brute.abs().max(1.0), "{} vs {}", got, brute);
    }

    #[test]
    fn intra_diversity_bounded_by_pair_extremes(gen in points(24, 2), targets in points(3, 2)) {
        let d = intra_diversity(&tensor(&gen), &tensor(&targets), &DistanceProxy::Euclidean).unwrap();
        let mut max = 0.0f64;
        for a in &gen { for b in &gen {
            max = max.max(a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt());
        } }
        prop_assert!(d >= 0.0 && d <= max + 1e-12);
    }

    #[test]
    fn pruned_is_absorbing(ops in prop::collection::vec((0usize..6, 0u8..3), 1..40)) {
        let mut bank = MemoryBank::new(6);
        let mut pruned = vec![false; 6];
        for (id, s) in ops {
            let state = Assignment::from_char(['P', 'F', 'X'][s as usize]).unwrap();
            let res = bank.set(id, state);
            if pruned[id] && state != Assignment::Pruned {
                prop_assert!(res.is_err());
            } else {
                prop_assert!(res.is_ok());
            }
            pruned[id] |= state == Assignment::Pruned;
            for (i, &p) in pruned.iter().enumerate() {
                prop_assert_eq!(bank.get(i) == Assignment::Pruned, p);
            }
        }
    }

    #[test]
    fn cumulative_target_monotone_and_capped(total in 1usize..40, rate in 0.0..0.5f64, n in 1usize..500) {
        let mut prev = 0;
        for r in 0..=total + 2 {
            let t = cumulative_target(r, total, rate, n);
            prop_assert!(t >= prev);
            prop_assert!(t as f64 <= rate * n as f64 + 1e-6);
            prev = t;
        }
        prop_assert_eq!(prev, (rate * n as f64 + 1e-9).floor() as usize);
    }

    #[test]
    fn nearest_neighbour_distance_ignores_pool_order(target in prop::collection::vec(-3.0..3.0f64, 2), pool in points(15, 2), seed in any::<u64>()) {
        let mut shuffled = pool.clone();
        let mut rng = stream(seed, Stream::Probe);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let (i, d) = nearest_neighbor(&target, &tensor(&pool)).unwrap();
        let (j, e) = nearest_neighbor(&target, &tensor(&shuffled)).unwrap();
        prop_assert_eq!(d, e);
        prop_assert_eq!(&pool[i], &shuffled[j]);
    }
}
