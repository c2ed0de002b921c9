use cilmp::harness::{build_model, generate_dataset, pretrain_phase, tune_phase, ExperimentConfig};

/// Four classes of one attribute each, far apart relative to the noise.
fn separable(seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"seed":{seed},"epochs":50,"batch_size":8,
            "optimizer":{{"kind":"adam","lr":0.001}},
            "data":{{"train_per_class":8,"test_per_class":4,"attributes_per_class":1,"seen_attributes":1,
                     "attributes_per_image":1,"background_attributes":4,"margin":2.0,"noise":0.1,
                     "knowledge_corr":1.0,"pretrain_pairs":256,"caption_len":6}},
            "encoder":{{"embed_dim":8,"hidden_dim":16,"image_tokens":2,"text_max_len":16}},
            "bank":{{"seq_len":4,"width":16}},
            "prompt":{{"context_len":2,"image_prompt_len":2,"r_proj":4,"r_sub":4,"r_z":4,"prefix_len":2,"suffix_len":2,
                       "projection_scale":0.3}},
            "pretrain":{{"epochs":15,"batch_size":16}}}}"#
    ))
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn training_halves_the_loss_on_a_separable_task() {
    let mut ratios = Vec::new();
    for seed in 1..=20 {
        let cfg = separable(seed);
        let (ds, bank) = generate_dataset(&cfg).unwrap();
        let pre = pretrain_phase(&cfg, &ds).unwrap();
        let fresh = build_model(&cfg, &ds, &bank, pre.clip.clone()).unwrap();
        let initial = fresh.loss_value(&ds.train.image_refs(), &ds.train.labels).unwrap();
        let run = tune_phase(&cfg, &ds, &bank, &pre).unwrap();
        let last = run.model.loss_value(&ds.train.image_refs(), &ds.train.labels).unwrap();
        assert!(run.report.encoder_checksum.unchanged());
        ratios.push(last / initial);
    }
    let m = median(ratios.clone());
    assert!(m < 0.5, "median final/initial loss {m}, ratios {ratios:?}");
}
