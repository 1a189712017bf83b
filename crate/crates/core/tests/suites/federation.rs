use fedfusion_core::data::{extract_patches, synth_generate, MultimodalDataset, SynthConfig};
use fedfusion_core::federation::*;
use fedfusion_core::model::{train_gradients, FusionModelParams, Modality, ModelConfig, Path};

pub fn scene(seed: u64) -> MultimodalDataset {
    synth_generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn tiny_model(d: &MultimodalDataset) -> ModelConfig {
    ModelConfig {
        branch_channels: 4,
        upsample_channels: 6,
        ..ModelConfig::new([d.channels(Modality::M1), d.channels(Modality::M2)], d.class_count)
    }
}

pub fn tiny_config(seed: u64, rounds: usize) -> FederationConfig {
    FederationConfig {
        seed,
        rounds,
        clients: 4,
        selected: 4,
        batch_size: 32,
        lr: 5e-3,
        ..FederationConfig::default()
    }
}

pub fn sgd_step(params: &mut FusionModelParams, lr: f64) {
    for (role, t) in params.tensors_with_roles_mut() {
        if !role.is_trainable() {
            continue;
        }
        let g: Vec<f32> = t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for (w, gv) in t.data_mut().iter_mut().zip(g) {
            *w = (*w as f64 - lr * gv as f64) as f32;
        }
    }
}

pub fn one_client_with_all_data_equals_centralised_sgd() {
    let d = scene(3);
    let model = tiny_model(&d);
    let cfg = FederationConfig {
        seed: 13,
        rounds: 20,
        clients: 2,
        selected: 2,
        local_epochs: 1,
        batch_size: 64,
        lr: 0.02,
        lr_decay_interval: 7,
        optimizer: OptimizerConfig::sgd(),
        keep: Keep::M1,
        ..FederationConfig::default()
    };
    let fed = run_training(&d, model.clone(), cfg.clone()).unwrap();
    assert!(fed.logs.iter().all(|l| l.selected == [0]));

    let all = extract_patches(&d, &d.train_idx, Modality::M1).unwrap();
    let mut central = FusionModelParams::init(model, init_seed(13)).unwrap();
    for t in 0..20 {
        let lr = 0.02 * 0.5f64.powi((t / 7) as i32);
        let order = minibatch_order(13, t, 0, 0, all.len());
        for rows in order.chunks(64) {
            let b = all.gather(rows).unwrap();
            train_gradients(&mut central, Modality::M1, &b.patches, None, &b.targets, Path::Single).unwrap();
            sgd_step(&mut central, lr);
        }
    }
    assert!(fed.model.bit_eq(&central));
}

pub fn capture_passes_the_schema_audit() {
    let d = scene(0);
    let model = tiny_model(&d);
    let cfg = FederationConfig {
        capture_wire: true,
        ..tiny_config(0, 1)
    };
    let out = run_training(&d, model.clone(), cfg).unwrap();
    let cap = out.capture.unwrap();
    let report = cap.audit(&out.model).unwrap();
    assert_eq!(report.model_messages, 8);
    assert!(report.feature_packets > 0);

    let mut tampered = cap.clone();
    let mut arrays = fedfusion_core::data::container::decode_container(&tampered.messages[0].bytes).unwrap();
    arrays.push(fedfusion_core::data::container::NamedArray::i32("labels", vec![2], vec![1, 2]));
    tampered.messages[0].bytes = fedfusion_core::data::container::encode_container(&arrays).unwrap();
    assert!(tampered.audit(&out.model).is_err());
}
