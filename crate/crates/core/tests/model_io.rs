mod common;

use common::{normal_cdf, rand_tensor};
use swav::model::{init_student, AcousticModel, ConvSpec, LayerSelection, ModelConfig};
use swav::numerics::{Rng, Tensor};
use swav::prune::{prune_layer, prune_model, sparsity, SensitivityMap};
use swav::quant::{model_size_bytes, quantize_model, QuantizedModel};

fn small() -> ModelConfig {
    ModelConfig {
        conv_layers: vec![ConvSpec::new(8, 8, 4), ConvSpec::new(16, 4, 2)],
        d_model: 16,
        n_transformer_layers: 3,
        n_heads: 2,
        ffn_dim: 32,
        n_tokens: 6,
        max_frames: 32,
    }
}

#[test]
fn serialized_sizes_follow_parameter_counts() {
    for layers in 1..=3 {
        let cfg = small().with_layers(layers);
        let m = AcousticModel::new(cfg.clone(), layers as u64).unwrap();
        assert_eq!(m.count_params(), cfg.param_count());
        assert_eq!(m.to_bytes().len(), model_size_bytes(&m));
        let q = quantize_model(&m).unwrap();
        assert_eq!(q.count_params(), m.count_params());
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), model_size_bytes(&q));
        assert_eq!(QuantizedModel::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}

#[test]
fn students_have_the_parameter_count_of_their_depth() {
    let teacher = AcousticModel::new(small(), 1).unwrap();
    for keep in 1..=3 {
        for sel in [LayerSelection::Alternating { keep }, LayerSelection::LastK { keep }] {
            let s = init_student(&teacher, &sel).unwrap();
            assert_eq!(s.count_params(), small().with_layers(keep).param_count());
        }
    }
}

#[test]
fn gaussian_sparsity_tracks_the_normal_cdf() {
    let mut rng = Rng::new(9);
    let w = rand_tensor(&mut rng, &[100_000], 0.7);
    for s in [0.1, 0.3, 0.4, 1.0] {
        let (pruned, _, _) = prune_layer(&w, s).unwrap();
        let frac = pruned.data().iter().filter(|&&v| v == 0.0).count() as f64 / w.len() as f64;
        let expected = 2.0 * normal_cdf(s) - 1.0;
        assert!((frac - expected).abs() < 0.01, "s = {s}: {frac} vs {expected}");
    }
}

#[test]
fn model_pruning_zeroes_only_prunable_weights() {
    let m = AcousticModel::new(small(), 4).unwrap();
    let (pruned, report) = prune_model(&m, &SensitivityMap::uniform(0.5).unwrap()).unwrap();
    assert!((sparsity(&pruned) - report.global_sparsity).abs() < 1e-12);
    let total: usize = report.layers.iter().map(|r| r.total).sum();
    let zeros: usize = report.layers.iter().map(|r| r.pruned).sum();
    assert!((zeros as f64 / total as f64 - report.global_sparsity).abs() < 1e-12);
    // Biases, norms and positions are untouched.
    for (a, b) in m.named_params().iter().zip(pruned.named_params()) {
        if !a.0.ends_with(".weight") {
            assert_eq!(a.1, b.1, "{}", a.0);
        }
    }
    let x = Tensor::vector((0..200).map(|i| (i as f64 * 0.1).sin()).collect());
    assert!(pruned.forward(&x).unwrap().logits.all_finite());
}
