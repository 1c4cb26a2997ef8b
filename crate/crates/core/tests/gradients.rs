//! Analytic gradients against central finite differences.

mod common;

use agnn::model::ModelKind;
use common::{model_gradient_error, op_gradient_error, FD_TOLERANCE, OPS};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for op in OPS {
            let err = op_gradient_error(op, seed);
            prop_assert!(err < FD_TOLERANCE, "{op}: relative error {err:.3e}");
        }
    }

    #[test]
    fn model_objectives_match_finite_differences(seed in any::<u64>()) {
        for kind in [ModelKind::Gln, ModelKind::Gcn, ModelKind::Agnn] {
            let err = model_gradient_error(kind, seed);
            prop_assert!(err < FD_TOLERANCE, "{kind}: relative error {err:.3e}");
        }
    }
}

#[test]
fn attention_gradient_on_a_three_node_path() {
    use agnn::SparseGraph;
    use ndarray::array;
    let g = SparseGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    let h = array![[1.0, 0.2], [-0.3, 0.8], [0.5, -0.6]];
    for beta in [-1.5, 0.0, 0.7, 3.0] {
        let err = common::gradient_check(&[h.clone(), array![[beta]]], 11, |t, v| {
            t.attention_propagate(v[0], v[1], &g).unwrap().0
        });
        assert!(err < FD_TOLERANCE, "beta {beta}: {err:.3e}");
    }
}
