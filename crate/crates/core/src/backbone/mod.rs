//! Vision backbones with MoE placement: isotropic token stacks and
//! four-stage hierarchical feature pyramids.

mod model;
mod spec;

pub use model::{
    layer_trace_record, param_layout, ClassifyOutput, ConvBlockRef, ExpertRef, FfnRef, GateRef,
    HierRef, ImageForward, IsoBlockRef, IsoRef, LayerRouting, LayoutEntry, LinearRef, Model,
    NetRef, NormRef, ParamEntry, ParamGroup, ParamMeta, PId, VitBlockRef, LN_EPS,
};
pub use spec::{
    placement_layers, preset, ArchSpec, HierarchicalSpec, IsoBlockKind, IsotropicSpec, ModelSpec,
    MoeSettings, PlacementStrategy, PRESET_NAMES,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{CapacityConfig, GateKind};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_vit_spec(placement: PlacementStrategy, moe: Option<MoeSettings>) -> ModelSpec {
        ModelSpec {
            arch: preset("micro-vit").unwrap(),
            placement,
            moe,
        }
    }

    fn moe4() -> MoeSettings {
        MoeSettings {
            num_experts: 4,
            top_k: 1,
            gate: GateKind::Linear,
            mlp_ratio: 2.0,
            capacity: CapacityConfig::Unlimited,
        }
    }

    fn random_batch(b: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * size * size;
        Tensor::new(
            vec![b, 3, size, size],
            (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = micro_vit_spec(PlacementStrategy::Last2, Some(moe4()));
        let (a, _) = Model::<f64>::build(&spec, 7).unwrap();
        let (b, _) = Model::<f64>::build(&spec, 7).unwrap();
        assert_eq!(a.params().len(), b.params().len());
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.name, y.name);
            let xb: Vec<u64> = x.tensor.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb, "param {} differs", x.name);
        }
        let (c, _) = Model::<f64>::build(&spec, 8).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(x, y)| x.tensor.data() != y.tensor.data());
        assert!(differs, "different seeds must differ");
    }

    #[test]
    fn nomoe_with_moe_settings_warns_and_builds_dense() {
        let spec = micro_vit_spec(PlacementStrategy::NoMoE, Some(moe4()));
        let (model, warnings) = Model::<f64>::build(&spec, 1).unwrap();
        assert_eq!(warnings.len(), 1);
        let has_moe = model.params().iter().any(|p| p.name.contains("gate"));
        assert!(!has_moe);
    }

    #[test]
    fn placement_without_settings_is_rejected() {
        let spec = micro_vit_spec(PlacementStrategy::Last2, None);
        assert!(Model::<f64>::build(&spec, 1).is_err());
    }

    #[test]
    fn layout_matches_materialized_build() {
        let spec = micro_vit_spec(PlacementStrategy::Last2, Some(moe4()));
        let layout = param_layout(&spec).unwrap();
        let (model, _) = Model::<f64>::build(&spec, 3).unwrap();
        assert_eq!(layout.len(), model.params().len());
        for (l, p) in layout.iter().zip(model.params()) {
            assert_eq!(l.name, p.name);
            assert_eq!(l.shape, p.tensor.shape());
        }
    }

    #[test]
    fn dense_forward_shapes_and_no_aux() {
        let spec = micro_vit_spec(PlacementStrategy::NoMoE, None);
        let (model, _) = Model::<f64>::build(&spec, 2).unwrap();
        let images = random_batch(2, 32, 11);
        let out = model.forward_classify(&images, Some(&[0, 5]), true).unwrap();
        assert_eq!(out.logits.shape(), &[2, 16]);
        assert_eq!(out.aux.item(), 0.0);
        assert!(out.trace.unwrap().is_empty());
    }

    #[test]
    fn moe_forward_records_trace_and_aux() {
        let spec = micro_vit_spec(PlacementStrategy::Last2, Some(moe4()));
        let (model, _) = Model::<f64>::build(&spec, 2).unwrap();
        let images = random_batch(3, 32, 12);
        let out = model.forward_classify(&images, Some(&[1, 2, 3]), true).unwrap();
        assert_eq!(out.logits.shape(), &[3, 16]);
        assert!(out.aux.item() > 0.0);
        let trace = out.trace.unwrap();
        // 3 images x 2 MoE layers
        assert_eq!(trace.records.len(), 6);
        let ids = trace.layer_ids();
        assert_eq!(ids, vec![3, 5]);
        for rec in &trace.records {
            rec.validate().unwrap();
            assert_eq!(rec.tokens(), 65); // 64 patches + class token
            assert_eq!(rec.k(), 1);
            assert!(rec.topk.iter().all(|row| row[0] < 4));
        }
    }

    #[test]
    fn micro_convnext_forward_works() {
        let spec = ModelSpec {
            arch: preset("micro-convnext").unwrap(),
            placement: PlacementStrategy::Last2,
            moe: Some(moe4()),
        };
        let (model, _) = Model::<f64>::build(&spec, 5).unwrap();
        let images = random_batch(2, 32, 13);
        let out = model.forward_classify(&images, None, true).unwrap();
        assert_eq!(out.logits.shape(), &[2, 16]);
        let trace = out.trace.unwrap();
        // blocks (1,1,3,1): last2 = final of stage 3 (global 4) and 4 (global 5)
        assert_eq!(trace.layer_ids(), vec![4, 5]);
        // stage grids: 32/4 = 8, then 4, 2, 1
        for rec in &trace.records {
            match rec.layer_id {
                4 => assert_eq!(rec.grid, [2, 2]),
                5 => assert_eq!(rec.grid, [1, 1]),
                other => panic!("unexpected layer {other}"),
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_logits_rows() {
        let spec = micro_vit_spec(PlacementStrategy::Last2, Some(moe4()));
        let (model, _) = Model::<f64>::build(&spec, 9).unwrap();
        let images = random_batch(3, 32, 14);
        let out = model.forward_classify(&images, None, false).unwrap();
        // build a permuted batch [2, 0, 1]
        let chw = 3 * 32 * 32;
        let mut data = Vec::with_capacity(3 * chw);
        for &b in &[2usize, 0, 1] {
            data.extend_from_slice(&images.data()[b * chw..(b + 1) * chw]);
        }
        let permuted = Tensor::new(vec![3, 3, 32, 32], data).unwrap();
        let out_p = model.forward_classify(&permuted, None, false).unwrap();
        let c = 16;
        for (new_row, &orig) in [2usize, 0, 1].iter().enumerate() {
            assert_eq!(
                &out_p.logits.data()[new_row * c..(new_row + 1) * c],
                &out.logits.data()[orig * c..(orig + 1) * c],
            );
        }
    }

    #[test]
    fn forward_rejects_wrong_resolution() {
        let spec = micro_vit_spec(PlacementStrategy::NoMoE, None);
        let (model, _) = Model::<f64>::build(&spec, 2).unwrap();
        let images = random_batch(1, 64, 15);
        assert!(model.forward_classify(&images, None, false).is_err());
    }
}
