//! Fuzzy-vector query embedding model.

mod loss;
mod model;
mod store;

pub use loss::{grad, loss, loss_and_grad, GradientMap, LossBatch, LossConfig, LossItem, Selector};
pub use model::{
    backward, forward, forward_branch, log_sigmoid, score, score_all, sigmoid, squashed_entities, BoundedVector,
    GradBuffers, PreparedBranch, PreparedQuery, SharedQuery, Trace,
};
pub use store::{Dims, ParameterStore, Slot};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{builtin_template, parse_tree, Category, InputKind, OperatorTypeKey, Scheme, DEFAULT_DEPTH_CAP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn store(seed: u64) -> ParameterStore {
        ParameterStore::init(Dims::new(12, 3, 4), seed)
    }

    fn prepared(text: &str, positives: &[u32], scheme: Option<Scheme>) -> SharedQuery {
        let tree = parse_tree(text).unwrap();
        Arc::new(PreparedQuery::from_tree("q", &tree, positives.to_vec(), scheme, DEFAULT_DEPTH_CAP).unwrap())
    }

    fn emb(text: &str, s: &ParameterStore) -> Vec<f64> {
        forward(&parse_tree(text).unwrap(), s, None, DEFAULT_DEPTH_CAP)
            .unwrap()
            .into_inner()
    }

    #[test]
    fn fuzzy_identities_hold() {
        let s = store(1);
        let x = emb("(p,1,(p,0,3))", &s);
        // 1 − (1 − x) can round once when x < 0.5
        let twice = emb("(i,(p,2,4),(n,(n,(p,1,(p,0,3)))))", &s);
        let once = emb("(i,(p,2,4),(p,1,(p,0,3)))", &s);
        assert!(twice.iter().zip(&once).all(|(a, b)| (a - b).abs() <= f64::EPSILON));
        let a = "(p,0,3)";
        assert_eq!(emb(&format!("(p,2,(i,{a},{a}))"), &s), emb(&format!("(p,2,{a})"), &s));
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn union_reaching_forward_is_a_contract_error() {
        let s = store(1);
        let t = parse_tree("(u,(p,0,1),(p,1,2))").unwrap();
        assert!(matches!(forward(&t, &s, None, 3), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn score_examples() {
        let mut s = ParameterStore::init(Dims::new(2, 1, 2), 0);
        s.entity = vec![-800.0, 800.0, 0.0, 0.0];
        assert!((score(&[0.5, 0.5], 0, &s) + 1.0).abs() < 1e-12);
        assert_eq!(score(&[0.5, 0.5], 1, &s), 0.0);
    }

    #[test]
    fn two_hop_routes_inner_and_outer_hops_under_input_scheme() {
        let mut s = store(3);
        let q = prepared("(p,1,(p,0,5))", &[0], Some(Scheme::I));
        let pe = OperatorTypeKey::projection(Scheme::I, Category::Input(InputKind::Entity));
        let pp = OperatorTypeKey::projection(Scheme::I, Category::Input(InputKind::Projection));
        let slots = |s: &ParameterStore| {
            let Trace::Projection { slot: outer, input, .. } = forward_branch(&q.branches[0], s).unwrap() else {
                panic!()
            };
            let Trace::Projection { slot: inner, .. } = *input else {
                panic!()
            };
            (inner, outer)
        };
        assert_eq!(slots(&s), (Slot::Shared, Slot::Shared));
        s.set_overlay(pe, vec![0.1; s.theta.len()]).unwrap();
        s.set_overlay(pp, vec![0.2; s.theta.len()]).unwrap();
        assert_eq!(slots(&s), (Slot::Overlay(pe), Slot::Overlay(pp)));
    }

    #[test]
    fn duplicated_query_leaves_loss_unchanged() {
        let s = store(2);
        let q = prepared("(p,1,(p,0,5))", &[2, 7], None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = LossBatch::sample([&q], &LossConfig::default(), 12, &mut rng).unwrap();
        let two = LossBatch {
            items: vec![one.items[0].clone(), one.items[0].clone()],
        };
        let cfg = LossConfig::default();
        assert!((loss(&one, &s, &cfg).unwrap() - loss(&two, &s, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_positive_set_is_rejected() {
        let q = prepared("(p,0,1)", &[], None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LossBatch::sample([&q], &LossConfig::default(), 12, &mut rng).is_err());
    }

    #[test]
    fn unused_overlay_gets_zero_gradient() {
        let mut s = store(4);
        let pp = OperatorTypeKey::projection(Scheme::I, Category::Input(InputKind::Projection));
        s.set_overlay(pp, s.theta.clone()).unwrap();
        let q = prepared("(i,(p,0,1),(p,1,2))", &[3], Some(Scheme::I));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = LossBatch::sample([&q], &LossConfig::default(), 12, &mut rng).unwrap();
        let g = grad(&b, &s, &LossConfig::default(), &Selector::overlay(pp)).unwrap();
        assert!(g.overlays[&pp].iter().all(|&x| x == 0.0));
        assert!(g.entity.is_none() && g.shared.is_none());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut s = store(5);
        let pe = OperatorTypeKey::projection(Scheme::I, Category::Input(InputKind::Entity));
        s.set_overlay(pe, s.theta.iter().map(|x| x * 0.9).collect()).unwrap();
        let queries: Vec<SharedQuery> = ["(p,1,(p,0,5))", "(i,(p,0,1),(n,(p,2,(p,1,4))))", "(u,(p,0,1),(p,2,3))"]
            .iter()
            .map(|t| prepared(t, &[2, 3], Some(Scheme::I)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig {
            margin: 2.0,
            negatives: 6,
        };
        let batch = LossBatch::sample(&queries, &cfg, 12, &mut rng).unwrap();
        let (_, g) = loss_and_grad(&batch, &s, &cfg).unwrap();
        let h = 1e-5;
        for _ in 0..15 {
            let i = rng.gen_range(0..s.theta.len());
            let mut plus = s.clone();
            plus.theta[i] += h;
            let mut minus = s.clone();
            minus.theta[i] -= h;
            let fd = (loss(&batch, &plus, &cfg).unwrap() - loss(&batch, &minus, &cfg).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.shared[i]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "theta {i}: {fd} vs {}",
                g.shared[i]
            );
        }
    }

    #[test]
    fn partition_identity_on_a_small_batch() {
        let s = store(6);
        let queries: Vec<SharedQuery> = [
            "(p,2,(p,1,(p,0,5)))",
            "(i,(p,0,1),(p,2,3))",
            "(p,2,(u,(p,0,1),(p,1,2)))",
        ]
        .iter()
        .map(|t| prepared(t, &[2], Some(Scheme::O)))
        .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LossConfig::default();
        let batch = LossBatch::sample(&queries, &cfg, 12, &mut rng).unwrap();
        let (_, plain) = loss_and_grad(&batch, &s, &cfg).unwrap();
        let mut over = s.clone();
        for k in queries.iter().flat_map(|q| q.categories()) {
            over.set_overlay(k, s.theta.clone()).unwrap();
        }
        let (_, split) = loss_and_grad(&batch, &over, &cfg).unwrap();
        assert!(split.shared.iter().all(|&x| x == 0.0));
        for (a, b) in split.theta_total().iter().zip(&plain.shared) {
            assert!((a - b).abs() <= 1e-12 + 1e-9 * b.abs());
        }
        assert_eq!(split.entity, plain.entity);
    }

    #[test]
    fn builtin_templates_stay_in_range() {
        let s = store(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in ["3p", "pi", "pni", "inp", "3in"] {
            let t = builtin_template(name).unwrap();
            let anchors: Vec<u32> = (0..t.anchors).map(|_| rng.gen_range(0..12)).collect();
            let rels: Vec<u32> = (0..t.relations).map(|_| rng.gen_range(0..3)).collect();
            let tree = t.bind(&anchors, &rels).unwrap();
            let v = forward(&tree, &s, None, 3).unwrap();
            assert!(v.values().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
