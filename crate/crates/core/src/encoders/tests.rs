use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::{Optimizer, OptimizerConfig};

fn small() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        num_layers: 2,
        hidden_dim: 16,
        image_tokens: 3,
        text_max_len: 10,
        vocab_size: 16,
        deep_prompt_layers: 2,
    }
}

fn clip(seed: u64) -> Clip {
    Clip::new(small(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn image(seed: u64) -> Tensor {
    Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn embeddings_have_unit_norm() {
    let c = clip(1);
    for s in 0..5 {
        let z = c.encode_image(&image(s)).unwrap();
        assert!((z.norm() - 1.0).abs() < 1e-12);
        let seq = c
            .embed_tokens(&TokenSequence::terminated(&[7, 8, 9, (s as usize) + 10]))
            .unwrap();
        let w = c.encode_text(&seq, None).unwrap();
        assert!((w.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn image_encoding_is_deterministic() {
    let c = clip(2);
    let x = image(3);
    assert_eq!(c.encode_image(&x).unwrap(), c.encode_image(&x.clone()).unwrap());
    let mut bad = x;
    bad.data_mut()[0] = f64::NAN;
    assert!(matches!(c.encode_image(&bad), Err(CilmpError::Evaluation(_))));
}

#[test]
fn tokens_after_end_are_ignored() {
    let c = clip(3);
    let a = TokenSequence {
        ids: vec![7, 8, vocab::EOS, 9, 10, 11],
        eos_index: 2,
    };
    let mut b = a.clone();
    b.ids[3..].reverse();
    let wa = c.encode_text(&c.embed_tokens(&a).unwrap(), None).unwrap();
    let wb = c.encode_text(&c.embed_tokens(&b).unwrap(), None).unwrap();
    assert_eq!(wa, wb);
    // Direct recomputation on the truncated sequence.
    let t = TokenSequence::terminated(&[7, 8]);
    let wt = c.encode_text(&c.embed_tokens(&t).unwrap(), None).unwrap();
    assert_eq!(wa, wt);
}

#[test]
fn single_layer_injection_matches_shallow_path() {
    let c = clip(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prompt = Tensor::randn(&[2, 8], 0.02, &mut rng);
    let base = c.embed_tokens(&TokenSequence::terminated(&[7, 7, 12])).unwrap();
    let mut rows = base.token_embeddings.clone();
    rows.data_mut()[..16].copy_from_slice(prompt.data());
    let shallow = TextSequence {
        token_embeddings: rows,
        eos_index: base.eos_index,
    };
    let w_shallow = c.encode_text(&shallow, None).unwrap();
    let w_injected = c
        .encode_text(&base, Some((0, std::slice::from_ref(&prompt))))
        .unwrap();
    assert_eq!(w_shallow, w_injected);

    let deeper = Tensor::randn(&[2, 8], 0.02, &mut rng);
    let w_deep = c
        .encode_text(&base, Some((0, &[prompt, deeper][..])))
        .unwrap();
    assert!(w_deep.max_abs_diff(&w_shallow) > 1e-9);
}

#[test]
fn overlong_text_is_rejected() {
    let c = clip(5);
    let seq = c.embed_tokens(&TokenSequence::terminated(&[7; 10])).unwrap();
    assert!(matches!(
        c.encode_text(&seq, None),
        Err(CilmpError::Length { len: 11, max: 10 })
    ));
}

fn pairs(n: usize) -> (Vec<Tensor>, Vec<TokenSequence>) {
    let images = (0..n).map(|i| image(100 + i as u64)).collect();
    let caps = (0..n).map(|i| TokenSequence::terminated(&[7 + i, vocab::GENERIC])).collect();
    (images, caps)
}

fn loss_parts(c: &Clip, images: &[Tensor], caps: &[TokenSequence], swap: bool) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let b = c.store().bind(&mut tape);
    let mut zs = Vec::new();
    let mut ws = Vec::new();
    for (x, t) in images.iter().zip(caps) {
        let xv = tape.constant(x.clone());
        zs.push(c.image_forward(&mut tape, &b, xv, &[]).unwrap());
        ws.push(c.caption_forward(&mut tape, &b, t).unwrap());
    }
    let z = tape.concat(&zs, 0).unwrap();
    let w = tape.concat(&ws, 0).unwrap();
    let (z, w) = if swap { (w, z) } else { (z, w) };
    let l = info_nce(&mut tape, z, w, b[c.log_tau()]).unwrap();
    (
        tape.value(l.total).item(),
        tape.value(l.image_to_text).item(),
        tape.value(l.text_to_image).item(),
    )
}

#[test]
fn initial_contrastive_loss_is_near_uniform() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Clip::new(EncoderConfig::default(), &mut rng).unwrap();
        let images: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[16, 64], 1.0, &mut rng)).collect();
        let caps: Vec<TokenSequence> = (0..4)
            .map(|i| TokenSequence::terminated(&[7 + i, 20 + i, vocab::GENERIC]))
            .collect();
        let (_, lv, _) = loss_parts(&c, &images, &caps, false);
        assert!((lv - 4f64.ln()).abs() < 0.5, "seed {seed}: {lv}");
    }
}

#[test]
fn swapping_roles_swaps_directions() {
    let c = clip(7);
    let (images, caps) = pairs(4);
    let (t0, v0, w0) = loss_parts(&c, &images, &caps, false);
    let (t1, v1, w1) = loss_parts(&c, &images, &caps, true);
    assert_eq!(v0, w1);
    assert_eq!(w0, v1);
    assert_eq!(t0, t1);
}

#[test]
fn equal_logits_give_log_n() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::full(&[5, 3], 0.5));
    let w = tape.constant(Tensor::full(&[5, 3], 0.5));
    let lt = tape.constant(Tensor::scalar(0.3));
    let l = info_nce(&mut tape, z, w, lt).unwrap();
    assert!((tape.value(l.total).item() - 5f64.ln()).abs() < 1e-12);
    let one = tape.constant(Tensor::full(&[1, 3], 0.5));
    assert!(matches!(info_nce(&mut tape, one, one, lt), Err(CilmpError::Config(_))));
}

#[test]
fn pretraining_separates_four_pairs() {
    let mut c = clip(8);
    let (images, caps) = pairs(4);
    let opts = PretrainOptions {
        epochs: 60,
        batch_size: 4,
        ..PretrainOptions::default()
    };
    let trace = c.pretrain(&images, &caps, &opts).unwrap();
    assert!(trace.last().unwrap() < &trace[0]);
    let z: Vec<Tensor> = images.iter().map(|x| c.encode_image(x).unwrap()).collect();
    let w: Vec<Tensor> = caps
        .iter()
        .map(|t| c.encode_text(&c.embed_tokens(t).unwrap(), None).unwrap())
        .collect();
    for i in 0..4 {
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let diag = dot(&z[i], &w[i]);
        for j in (0..4).filter(|&j| j != i) {
            assert!(diag > dot(&z[i], &w[j]), "row {i} col {j}");
        }
    }
}

#[test]
fn pretraining_is_reproducible_and_rejects_singletons() {
    let (images, caps) = pairs(5);
    let opts = PretrainOptions {
        epochs: 2,
        batch_size: 2,
        ..PretrainOptions::default()
    };
    let mut a = clip(9);
    let mut b = clip(9);
    assert_eq!(
        a.pretrain(&images, &caps, &opts).unwrap(),
        b.pretrain(&images, &caps, &opts).unwrap()
    );
    assert_eq!(a.encoder_checksum(), b.encoder_checksum());
    let bad = PretrainOptions {
        batch_size: 1,
        ..opts
    };
    assert!(matches!(a.pretrain(&images, &caps, &bad), Err(CilmpError::Config(_))));
}

#[test]
fn freeze_is_idempotent_and_blocks_updates() {
    let mut c = clip(10);
    let f1 = c.freeze();
    let f2 = c.freeze();
    assert_eq!(f1, f2);
    assert!(f1.frozen);
    assert_eq!(c.store().trainable_count(), 0);
    let id = c.log_tau();
    let g = Tensor::scalar(1.0);
    let mut opt = Optimizer::new(OptimizerConfig::default());
    assert!(matches!(
        opt.apply(c.store_mut(), &[(id, &g)]),
        Err(CilmpError::Frozen(_))
    ));
    assert_eq!(c.encoder_checksum(), f1.checksum);
}

#[test]
fn temperature_starts_at_one_twentieth() {
    let c = clip(11);
    assert!((1.0 / c.temperature() - 20.0).abs() < 1e-12);
}

#[test]
fn parameter_total_matches_registry() {
    for cfg in [small(), EncoderConfig::default()] {
        let c = Clip::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c.encoder_param_count(), encoder_param_total(&cfg));
        assert_eq!(c.store().total_count(), encoder_param_total(&cfg));
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let c = clip(12);
    let bytes = c.encoder_bytes().unwrap();
    let back = Clip::from_encoder_bytes(&bytes).unwrap();
    assert_eq!(back.encoder_checksum(), c.encoder_checksum());
    let x = image(1);
    assert_eq!(back.encode_image(&x).unwrap(), c.encode_image(&x).unwrap());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Clip::from_encoder_bytes(&bad), Err(CilmpError::Format { .. })));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(Clip::from_encoder_bytes(cut), Err(CilmpError::Format { .. })));
}

#[test]
fn config_validation() {
    let mut cfg = small();
    cfg.deep_prompt_layers = 3;
    assert!(cfg.validate().is_err());
    cfg.deep_prompt_layers = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small();
    cfg.hidden_dim = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn batched_towers_match_single_sequence_paths() {
    let c = clip(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let images: Vec<Tensor> = (0..3).map(|s| image(20 + s)).collect();
    let p0 = Tensor::randn(&[2, 8], 0.02, &mut rng);
    let p1 = Tensor::randn(&[2, 8], 0.02, &mut rng);

    let mut tape = Tape::new();
    let b = c.store().bind_constants(&mut tape);
    let prompts = [tape.constant(p0.clone()), tape.constant(p1.clone())];
    let singles: Vec<Var> = images
        .iter()
        .map(|x| {
            let xv = tape.constant(x.clone());
            c.image_forward(&mut tape, &b, xv, &prompts).unwrap()
        })
        .collect();
    let stacked: Vec<f64> = images.iter().flat_map(|x| x.data().to_vec()).collect();
    let xs = tape.constant(Tensor::new(vec![9, 8], stacked).unwrap());
    let batch = c.image_forward_batch(&mut tape, &b, xs, 3, &prompts).unwrap();
    for (i, &s) in singles.iter().enumerate() {
        let row = Tensor::new(vec![1, 8], tape.value(batch).row(i).to_vec()).unwrap();
        assert!(row.max_abs_diff(tape.value(s)) < 1e-12);
    }

    let seqs: Vec<TextSequence> = [[7usize, 8, 9], [10, 11, 12]]
        .iter()
        .map(|w| c.embed_tokens(&TokenSequence::terminated(w)).unwrap())
        .collect();
    let slot = |tape: &mut Tape| DeepSlots {
        start: 1,
        from_block: 0,
        layers: vec![tape.constant(p0.clone()), tape.constant(p1.clone())],
    };
    let s = slot(&mut tape);
    let singles: Vec<Var> = seqs
        .iter()
        .map(|q| {
            let rows = tape.constant(q.token_embeddings.clone());
            c.text_forward(&mut tape, &b, rows, q.eos_index, std::slice::from_ref(&s)).unwrap()
        })
        .collect();
    let stacked: Vec<f64> = seqs.iter().flat_map(|q| q.token_embeddings.data().to_vec()).collect();
    let rows = tape.constant(Tensor::new(vec![8, 8], stacked).unwrap());
    let batch = c.text_forward_batch(&mut tape, &b, rows, 4, &[s]).unwrap();
    for (i, &s) in singles.iter().enumerate() {
        let row = Tensor::new(vec![1, 8], tape.value(batch).row(i).to_vec()).unwrap();
        assert!(row.max_abs_diff(tape.value(s)) < 1e-12);
    }
}
