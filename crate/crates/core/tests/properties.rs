use proptest::prelude::*;

use rise_core::embedding::dot;
use rise_core::losses::{
    absolute_distance_loss, absolute_distance_with_grad, relative_distance_loss, relative_distance_with_grad,
    total_loss,
};
use rise_core::{
    AbsoluteMetric, Embedding, InnerMetric, LabeledSample, LossConfig, LossContext, OuterMetric, TeacherTable,
};

const IDENTITY_TOL: f64 = 1e-10;
const FIXED_POINT_TOL: f64 = 1e-9;

const ABS: [AbsoluteMetric; 4] =
    [AbsoluteMetric::Cosine, AbsoluteMetric::L1, AbsoluteMetric::L2, AbsoluteMetric::SupContrastive];
const OUTER: [OuterMetric; 3] = [OuterMetric::Mse, OuterMetric::L1, OuterMetric::KlOnSoftmax];
const INNER: [InnerMetric; 2] = [InnerMetric::CosineSim, InnerMetric::L2];

fn vec_in(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, dim)
}

fn embedding(dim: usize) -> impl Strategy<Value = Embedding> {
    vec_in(dim).prop_filter_map("degenerate", |v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-3).then(|| Embedding::new(v).unwrap())
    })
}

/// Three classes, three domains, dimension four.
fn table() -> impl Strategy<Value = TeacherTable> {
    (
        proptest::collection::vec(embedding(4), 3),
        proptest::collection::vec(proptest::collection::vec(embedding(4), 3), 3),
        1.0f64..100.0,
    )
        .prop_map(|(generic, anchors, scale)| {
            TeacherTable::new(
                "p",
                scale,
                vec!["a".into(), "b".into(), "c".into()],
                vec!["x".into(), "y".into(), "z".into()],
                generic,
                None,
                anchors,
            )
            .unwrap()
        })
}

fn loss_config() -> impl Strategy<Value = LossConfig> {
    (
        (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
        0.5f64..4.0,
        0usize..4,
        0usize..3,
        0usize..2,
        any::<bool>(),
        0.05f64..1.0,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|((l1, l2, l3), t, k, k1, k2, t_sq, tau, absolute, relative)| LossConfig {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            temperature_t: t,
            metric_k: ABS[k],
            metric_k1: OUTER[k1],
            metric_k2: INNER[k2],
            hint_t_squared: t_sq,
            contrastive_tau: tau,
            absolute,
            relative,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn total_is_weighted_sum_of_terms(
        table in table(),
        cfg in loss_config(),
        logits in vec_in(3),
        u in embedding(4),
        teacher_emb in embedding(4),
        label in 0usize..3,
        domain in 0usize..3,
    ) {
        let sample = LabeledSample { id: "s".into(), feature: vec![0.0], teacher_emb, label, domain };
        let sources: Vec<usize> = (0..3).filter(|&d| d != domain).collect();
        let ctx = LossContext::new(&table, table.generic.clone(), sources);
        let b = total_loss(&logits, &u, &sample, &ctx, &cfg).unwrap();
        let expected = cfg.lambda1 * b.ce + cfg.lambda2 * b.hint + cfg.lambda3 * (b.ad + b.rd);
        prop_assert!((b.total - expected).abs() <= IDENTITY_TOL, "{:?} vs {}", b, expected);
        prop_assert!(b.ce >= 0.0 && b.hint >= -1e-12 && b.ad >= -1e-12 && b.rd >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_terms_vanish_at_the_target(
        target in embedding(6),
        anchors in proptest::collection::vec(embedding(6), 1..5),
    ) {
        for k in [AbsoluteMetric::Cosine, AbsoluteMetric::L1, AbsoluteMetric::L2] {
            let v = absolute_distance_loss(&target, &target, k).unwrap();
            prop_assert!(v.abs() <= FIXED_POINT_TOL, "{:?}: {}", k, v);
        }
        for k1 in OUTER {
            for k2 in INNER {
                let v = relative_distance_loss(&target, &target, &anchors, k1, k2).unwrap();
                prop_assert!(v.abs() <= FIXED_POINT_TOL, "{:?}/{:?}: {}", k1, k2, v);
                let (gv, _) = relative_distance_with_grad(&target, &target, &anchors, k1, k2).unwrap();
                prop_assert!(gv.abs() <= FIXED_POINT_TOL);
            }
        }
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_u(u in embedding(6), target in embedding(6)) {
        let (_, g) = absolute_distance_with_grad(&u, &target, AbsoluteMetric::Cosine).unwrap();
        let u_norm = dot(&u, &u).sqrt();
        // ∇u·u is exactly zero in real arithmetic; compare at unit scale
        prop_assert!((dot(&g, &u) / u_norm).abs() <= FIXED_POINT_TOL);
    }
}
