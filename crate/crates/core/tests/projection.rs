//! Top-k projection against an exhaustive oracle, and ADMM loop properties.

use proptest::prelude::*;
use rand::Rng;
use textdistill_core::admm::{
    distill, dual_update, embed, project_topk, project_topk_in, topk_violation, topk_violation_in,
    x_update, ADMMConfig, ClassSpec, Objective,
};
use textdistill_core::lm::{topk_next, ModelConfig, ModelParams, TokenSequence};
use textdistill_core::target::{build_class_targets, DPConfig, GradientTarget};
use textdistill_core::{SeedStream, Tensor};

fn tiny_model(vocab: usize, dim: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        layers: 1,
        dim,
        heads: 2,
        n_max: 8,
        vocab_size: vocab,
        ..ModelConfig::default()
    };
    ModelParams::init(cfg, SeedStream::new(seed)).unwrap()
}

fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed).rng();
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Every prefix-feasible sequence, ranked by the per-row distances in order
/// (ties to the lower id at that row); the minimum is the greedy answer.
fn brute_force(m: &Tensor, params: &ModelParams, k: usize) -> Vec<usize> {
    let v = params.config.vocab_size;
    let n = m.rows();
    let e = params.embeddings();
    let mut best: Option<(Vec<(f64, usize)>, Vec<usize>)> = None;
    for code in 0..v.pow(n as u32) {
        let mut ids = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            ids.push(c % v);
            c /= v;
        }
        let feasible = (0..n).all(|i| topk_next(&ids[..i], params, k).unwrap().contains(&ids[i]));
        if !feasible {
            continue;
        }
        let key: Vec<(f64, usize)> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (sq_dist(m.row(i), e.row(id)), id))
            .collect();
        let better = match &best {
            None => true,
            Some((bk, _)) => {
                key.iter()
                    .zip(bk)
                    .map(|(a, b)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .find(|o| o.is_ne())
                    == Some(std::cmp::Ordering::Less)
            }
        };
        if better {
            best = Some((key, ids));
        }
    }
    best.unwrap().1
}

#[test]
fn greedy_projection_matches_exhaustive_oracle() {
    for seed in 0..25 {
        let params = tiny_model(8, 4, seed);
        let m = random_matrix(3, 4, 1.0, seed + 100);
        let (ids, z) = project_topk(&m, &params, 2).unwrap();
        assert_eq!(ids, brute_force(&m, &params, 2), "seed {seed}");
        assert_eq!(z.data(), embed(&params, &ids).unwrap().data());
    }
}

#[test]
fn full_width_is_nearest_neighbour() {
    let params = tiny_model(12, 4, 3);
    let e = params.embeddings();
    let m = random_matrix(4, 4, 1.0, 33);
    let (ids, _) = project_topk(&m, &params, 12).unwrap();
    for (i, &id) in ids.iter().enumerate() {
        let nn = (0..12)
            .min_by(|&a, &b| sq_dist(m.row(i), e.row(a)).total_cmp(&sq_dist(m.row(i), e.row(b))))
            .unwrap();
        assert_eq!(id, nn);
    }
}

#[test]
fn exact_embedding_of_feasible_token_is_chosen() {
    let params = tiny_model(16, 4, 4);
    let first = topk_next(&[], &params, 3).unwrap()[1];
    let second = topk_next(&[first], &params, 3).unwrap()[2];
    let m = embed(&params, &[first, second]).unwrap();
    let (ids, _) = project_topk(&m, &params, 3).unwrap();
    assert_eq!(ids, vec![first, second]);
}

#[test]
fn restricted_support_is_respected() {
    let params = tiny_model(16, 4, 5);
    let support: Vec<usize> = (6..16).collect();
    let m = embed(&params, &[0, 1, 2, 3]).unwrap();
    for k in [1, 3, 10, 40] {
        let (ids, _) = project_topk_in(&m, &params, k, &support).unwrap();
        assert!(ids.iter().all(|id| support.contains(id)), "k {k}: {ids:?}");
        assert_eq!(topk_violation_in(&ids, &params, k, &support).unwrap(), None);
    }
    assert_eq!(topk_violation_in(&[0, 7], &params, 3, &support).unwrap(), Some(0));
    assert!(project_topk_in(&m, &params, 0, &support).is_err());
    assert!(project_topk_in(&m, &params, 2, &[]).is_err());
    assert!(project_topk_in(&m, &params, 2, &[99]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn topk_sets_are_nested(seed in 0u64..500, k in 1usize..11) {
        let params = tiny_model(12, 4, seed);
        let prefix = [(seed % 12) as usize];
        let small = topk_next(&prefix, &params, k).unwrap();
        let large = topk_next(&prefix, &params, k + 1).unwrap();
        prop_assert!(small.iter().all(|id| large.contains(id)));
    }

    #[test]
    fn projected_sequences_pass_recheck(seed in 0u64..500, k in 1usize..6) {
        let params = tiny_model(10, 4, seed);
        let m = random_matrix(4, 4, 2.0, seed);
        let (ids, z) = project_topk(&m, &params, k).unwrap();
        prop_assert_eq!(topk_violation(&ids, &params, k).unwrap(), None);
        for (i, &id) in ids.iter().enumerate() {
            prop_assert!(id < 10);
            prop_assert_eq!(z.row(i), params.embeddings().row(id));
        }
    }
}

#[test]
fn dual_update_examples() {
    let l0 = Tensor::zeros(&[2, 2]);
    let x = Tensor::full(&[2, 2], 3.0);
    let z = Tensor::full(&[2, 2], 2.0);
    assert_eq!(dual_update(&l0, &x, &z, 2.0).unwrap().data(), &[2.0; 4]);
    let l1 = Tensor::full(&[2, 2], 0.7);
    assert_eq!(dual_update(&l1, &x, &x, 5.0).unwrap().data(), l1.data());
}

struct Setup {
    params: ModelParams,
    targets: Vec<GradientTarget>,
    specs: Vec<ClassSpec>,
    pool: Vec<usize>,
}

fn setup() -> Setup {
    let params = tiny_model(20, 8, 9);
    let labels = [4, 5];
    let real: Vec<TokenSequence> = (0..6)
        .map(|i| {
            let c = i % 2;
            TokenSequence::new(vec![6 + i, 7 + 2 * c, 12 + i], vec![labels[c]], Some(c))
        })
        .collect();
    let targets =
        build_class_targets(&real, 2, &params, &DPConfig::non_private(), SeedStream::new(1)).unwrap();
    let specs = vec![
        ClassSpec { class: 0, label_token: labels[0], n_tokens: 3 },
        ClassSpec { class: 1, label_token: labels[1], n_tokens: 3 },
    ];
    Setup { params, targets, specs, pool: (6..20).collect() }
}

fn small_admm(pool_per_class: usize) -> ADMMConfig {
    ADMMConfig {
        rho: 1.0,
        t: 3,
        inner_steps: 5,
        inner_lr: 0.01,
        init_steps: 5,
        k: 6,
        pool_per_class,
    }
}

fn scaled(targets: &[GradientTarget], c: f64) -> Vec<GradientTarget> {
    let mut out = targets.to_vec();
    for t in &mut out {
        t.g.iter_mut().for_each(|v| *v *= c);
    }
    out
}

#[test]
fn target_scaling_leaves_objective_and_trajectory_unchanged() {
    let s = setup();
    let x = random_matrix(3, 8, 1.0, 77);
    for c in [10.0, 0.3, 8.0] {
        let sc = scaled(&s.targets, c);
        let a = Objective::new(&s.params, &s.targets[0], 4).unwrap().value(&x).unwrap();
        let b = Objective::new(&s.params, &sc[0], 4).unwrap().value(&x).unwrap();
        assert!((a - b).abs() <= 1e-9, "c {c}: {a} vs {b}");
    }
    // A power-of-two factor is exact in floating point, so the whole run
    // must be bit-identical.
    let cfg = small_admm(2);
    let a = distill(&s.params, &s.targets, &s.specs, &s.pool, &cfg, SeedStream::new(3)).unwrap();
    let b = distill(&s.params, &scaled(&s.targets, 8.0), &s.specs, &s.pool, &cfg, SeedStream::new(3))
        .unwrap();
    for (p, q) in a.pool.iter().zip(&b.pool) {
        assert_eq!(p.ids, q.ids);
        assert_eq!(p.x.data(), q.x.data());
        assert_eq!(p.match_loss, q.match_loss);
    }
}

#[test]
fn candidates_are_independent() {
    let s = setup();
    let one =
        distill(&s.params, &s.targets, &s.specs[..1], &s.pool, &small_admm(1), SeedStream::new(4)).unwrap();
    let many =
        distill(&s.params, &s.targets, &s.specs, &s.pool, &small_admm(3), SeedStream::new(4)).unwrap();
    let a = &one.pool[0];
    let b = many.pool.iter().find(|c| c.class == 0).unwrap();
    assert_eq!(a.ids, b.ids);
    assert_eq!(a.x.data(), b.x.data());
    assert_eq!(a.lambda.data(), b.lambda.data());
}

#[test]
fn distilled_pool_satisfies_constraints() {
    let s = setup();
    let cfg = small_admm(3);
    let out = distill(&s.params, &s.targets, &s.specs, &s.pool, &cfg, SeedStream::new(6)).unwrap();
    assert_eq!(out.pool.len(), 6);
    for c in &out.pool {
        assert_eq!(c.ids.len(), 3);
        assert!(c.lambda.all_finite());
        assert_eq!(c.z.data(), embed(&s.params, &c.ids).unwrap().data());
        assert_eq!(topk_violation_in(&c.ids, &s.params, cfg.k, &s.pool).unwrap(), None);
    }
    assert!(out.log.iter().all(|r| r.primal_residual.is_finite()));
    assert_eq!(out.log.len(), 6 * cfg.t);
}

#[test]
fn zero_rounds_project_the_initialization() {
    let s = setup();
    let cfg = ADMMConfig { t: 0, ..small_admm(1) };
    let out = distill(&s.params, &s.targets, &s.specs, &s.pool, &cfg, SeedStream::new(8)).unwrap();
    for c in &out.pool {
        let (ids, _) = project_topk_in(&c.x, &s.params, cfg.k, &s.pool).unwrap();
        assert_eq!(ids, c.ids);
        assert!(c.lambda.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn inner_objective_decreases_for_most_rounds() {
    let s = setup();
    let cfg = ADMMConfig { t: 5, inner_steps: 10, ..small_admm(5) };
    let out = distill(&s.params, &s.targets, &s.specs, &s.pool, &cfg, SeedStream::new(10)).unwrap();
    let down = out.inner.iter().filter(|r| r.end <= r.start).count();
    assert!(
        down as f64 >= 0.9 * out.inner.len() as f64,
        "{down} of {} rounds decreased",
        out.inner.len()
    );
}

#[test]
fn stiff_penalty_pins_primal_iterate() {
    let s = setup();
    let obj = Objective::new(&s.params, &s.targets[0], 4).unwrap();
    let x0 = embed(&s.params, &[7, 8, 9]).unwrap();
    let lambda = Tensor::zeros(x0.shape());
    let (x, _) = x_update(&obj, &x0, &x0, &lambda, 1e6, 20, 0.008).unwrap();
    let disp = sq_dist(x.data(), x0.data()).sqrt();
    assert!(disp < 1e-3, "displacement {disp}");
    let (x_free, _) = x_update(&obj, &x0, &x0, &lambda, 1e-6, 20, 0.008).unwrap();
    assert!(sq_dist(x_free.data(), x0.data()).sqrt() > 10.0 * disp);
}
