use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsight::gradcheck::{relative_error, FD_STEP, GRAD_REL_TOL};
use xsight::model::*;
use xsight::tensor::{BnMode, Tape, Tensor, BN_EPSILON};
use xsight::text::{EmbeddingMatrix, PAD_ID};

const VOCAB: usize = 20;
const DIM: usize = 6;
const FILTERS: usize = 4;
const MAX_LEN: usize = 12;
const SIDE: usize = 16;

fn embedding(seed: u64) -> EmbeddingMatrix {
    let mut e = EmbeddingMatrix::random(VOCAB, DIM, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for v in e.vectors.data_mut()[DIM..].iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    e
}

fn model(mode: Mode, seed: u64) -> Classifier {
    let text = mode
        .uses_text()
        .then(|| build_text_submodel(&embedding(seed), FILTERS, MAX_LEN, seed + 1).unwrap());
    let image = mode
        .uses_image()
        .then(|| build_image_submodel(SIDE, 2, 2, seed + 2).unwrap());
    Classifier::new(mode, text, image, 8, seed + 3).unwrap()
}

fn sample(i: usize, rng: &mut ChaCha8Rng, label: u8) -> Sample {
    let len = rng.gen_range(3..MAX_LEN);
    let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(2..VOCAB)).collect();
    tokens.resize(MAX_LEN, PAD_ID);
    let pixels = (0..SIDE * SIDE).map(|_| rng.gen_range(0.0..1.0)).collect();
    Sample {
        case_id: format!("c{i}"),
        image: Tensor::new(vec![SIDE, SIDE, 1], pixels).unwrap(),
        tokens,
        true_length: len,
        label,
    }
}

fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = rng.gen_range(0..2u8);
            sample(i, &mut rng, label)
        })
        .collect()
}

/// Abnormal cases carry token 3 and a bright square; normal ones never do.
fn separable_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut s = sample(i, &mut rng, label);
            for t in s.tokens[..s.true_length].iter_mut() {
                if *t == 3 {
                    *t = 4;
                }
            }
            for p in s.image.data_mut() {
                *p *= 0.2;
            }
            if label == 1 {
                let at = rng.gen_range(0..s.true_length);
                s.tokens[at] = 3;
                let (r0, c0) = (rng.gen_range(2..10), rng.gen_range(2..10));
                for r in r0..r0 + 4 {
                    for c in c0..c0 + 4 {
                        s.image.data_mut()[r * SIDE + c] = 0.9;
                    }
                }
            }
            s
        })
        .collect()
}

fn value(m: &Classifier, name: &str) -> Vec<f64> {
    m.store.value(m.store.id(name).unwrap()).data().to_vec()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Straight-loop forward pass of the classifier in inference mode.
fn reference_logit(m: &Classifier, s: &Sample) -> f64 {
    let emb = value(m, EMBEDDING_PARAM);
    let mut fused = Vec::new();
    for w in TEXT_WIDTHS {
        let k = value(m, &format!("text.conv{w}.kernel"));
        let b = value(m, &format!("text.conv{w}.bias"));
        for f in 0..FILTERS {
            let mut best = f64::NEG_INFINITY;
            for t in 0..=MAX_LEN - w {
                let mut acc = b[f];
                for j in 0..w {
                    let id = s.tokens[t + j];
                    for d in 0..DIM {
                        acc += emb[id * DIM + d] * k[(j * DIM + d) * FILTERS + f];
                    }
                }
                best = best.max(relu(acc));
            }
            fused.push(best);
        }
    }
    let mut x = s.image.data().to_vec();
    let (mut side, mut cin) = (SIDE, 1);
    for stage in 0..2 {
        let k = value(m, &format!("image.stage{stage}.kernel"));
        let b = value(m, &format!("image.stage{stage}.bias"));
        let cout = 2 << stage;
        let mut conv = vec![0.0; side * side * cout];
        for r in 0..side {
            for c in 0..side {
                for o in 0..cout {
                    let mut acc = b[o];
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let (ir, ic) = (r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                            if ir < 0 || ic < 0 || ir >= side as isize || ic >= side as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[(ir as usize * side + ic as usize) * cin + ci]
                                    * k[((kr * 3 + kc) * cin + ci) * cout + o];
                            }
                        }
                    }
                    conv[(r * side + c) * cout + o] = relu(acc);
                }
            }
        }
        let half = side / 2;
        let mut pooled = vec![f64::NEG_INFINITY; half * half * cout];
        for r in 0..side {
            for c in 0..side {
                for o in 0..cout {
                    let slot = &mut pooled[((r / 2) * half + c / 2) * cout + o];
                    *slot = slot.max(conv[(r * side + c) * cout + o]);
                }
            }
        }
        x = pooled;
        side = half;
        cin = cout;
    }
    let gamma = value(m, "image.bn.gamma");
    let beta = value(m, "image.bn.beta");
    let rm = value(m, "image.bn.running_mean");
    let rv = value(m, "image.bn.running_var");
    for o in 0..cin {
        let avg = (0..side * side).map(|p| x[p * cin + o]).sum::<f64>() / (side * side) as f64;
        fused.push((avg - rm[o]) / (rv[o] + BN_EPSILON).sqrt() * gamma[o] + beta[o]);
    }
    let hw = value(m, "decoder.hidden.weight");
    let hb = value(m, "decoder.hidden.bias");
    let ow = value(m, "decoder.out.weight");
    let ob = value(m, "decoder.out.bias");
    let hidden: Vec<f64> = (0..hb.len())
        .map(|h| relu(hb[h] + (0..fused.len()).map(|i| hw[h * fused.len() + i] * fused[i]).sum::<f64>()))
        .collect();
    ob[0] + hidden.iter().zip(&ow).map(|(h, w)| h * w).sum::<f64>()
}

fn batch_loss(m: &Classifier, batch: &[&Sample]) -> f64 {
    let mut tape = Tape::new();
    let inputs: Vec<ModelInput> = batch.iter().map(|s| ModelInput::from(*s)).collect();
    let (outs, _) = m.forward_batch(&mut tape, &inputs, BnMode::Train, false).unwrap();
    let losses: Vec<_> = outs
        .iter()
        .zip(batch)
        .map(|(o, s)| tape.bce_loss(o.prob, f64::from(s.label)).unwrap())
        .collect();
    let l = tape.mean(&losses).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn text_features_have_three_banks() {
    let t = build_text_submodel(&embedding(0), 8, MAX_LEN, 0).unwrap();
    assert_eq!(t.feature_len(), 24);
    let m = Classifier::new(Mode::TextOnly, Some(t), None, 8, 0).unwrap();
    let pad = vec![PAD_ID; MAX_LEN];
    let input = ModelInput {
        image: None,
        tokens: &pad,
    };
    let feats = m.fused_features(input).unwrap();
    assert_eq!(feats.len(), 24);
    assert!(feats.iter().all(|&f| f == 0.0));
    assert!(m.predict(input).unwrap().is_finite());
    let short = vec![PAD_ID; MAX_LEN - 1];
    assert!(m
        .predict(ModelInput {
            image: None,
            tokens: &short
        })
        .is_err());
}

#[test]
fn forward_matches_layer_by_layer_reference() {
    let mut m = model(Mode::Multimodal, 5);
    let samples = random_samples(6, 11);
    let refs: Vec<&Sample> = samples.iter().collect();
    m.recalibrate_batch_norm(&refs).unwrap();
    for s in &samples {
        let got = m.logit(ModelInput::from(s)).unwrap();
        let want = reference_logit(&m, s);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn image_geometry() {
    let img = build_image_submodel(64, 3, 4, 0).unwrap();
    assert_eq!(img.config.final_spatial(), 8);
    assert_eq!(img.feature_len(), 16);
    assert!(matches!(build_image_submodel(64, 0, 4, 0), Err(xsight::Error::Construction(_))));
    assert!(build_image_submodel(60, 3, 4, 0).is_err());
}

#[test]
fn decoder_input_is_the_concatenation() {
    let t = build_text_submodel(&embedding(1), 8, MAX_LEN, 0).unwrap();
    let i = build_image_submodel(64, 3, 8, 0).unwrap();
    let mut m = build_multimodal(t, i, 16, 0).unwrap();
    assert_eq!(m.config().fused_len(), 24 + 32);
    m.zero_decoder();
    let s = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = sample(0, &mut rng, 1);
        s.image = Tensor::filled(&[64, 64, 1], 0.3);
        s
    };
    assert_eq!(m.fused_features(ModelInput::from(&s)).unwrap().len(), 56);
    assert_eq!(m.predict(ModelInput::from(&s)).unwrap(), 0.5);
}

#[test]
fn wrong_submodels_rejected() {
    let t = build_text_submodel(&embedding(1), 4, MAX_LEN, 0).unwrap();
    assert!(Classifier::new(Mode::ImageOnly, Some(t), None, 8, 0).is_err());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut m = model(Mode::Multimodal, 21);
    let samples = random_samples(3, 4);
    let batch: Vec<&Sample> = samples.iter().collect();
    m.train_batch(&batch).unwrap();
    let used: Vec<usize> = samples[0].tokens[..samples[0].true_length].to_vec();
    let checks = [
        (EMBEDDING_PARAM, used[0] * DIM + 2),
        ("text.conv4.kernel", 7),
        ("image.stage0.kernel", 3),
        ("image.stage1.bias", 1),
        ("image.bn.gamma", 2),
        ("decoder.hidden.weight", 12),
    ];
    for (name, idx) in checks {
        let id = m.store.id(name).unwrap();
        let analytic = m.store.grad(id).data()[idx];
        let orig = m.store.value(id).data()[idx];
        m.store.value_mut(id).data_mut()[idx] = orig + FD_STEP;
        let up = batch_loss(&m, &batch);
        m.store.value_mut(id).data_mut()[idx] = orig - FD_STEP;
        let down = batch_loss(&m, &batch);
        m.store.value_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic, numeric);
        assert!(err < GRAD_REL_TOL, "{name}[{idx}]: {analytic} vs {numeric}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = model(Mode::Multimodal, 2);
    m.save_checkpoint(&path).unwrap();
    let mut back = Classifier::from_config(m.config()).unwrap();
    back.load_checkpoint(&path).unwrap();
    for s in &random_samples(4, 3) {
        assert_eq!(
            m.logit(ModelInput::from(s)).unwrap().to_bits(),
            back.logit(ModelInput::from(s)).unwrap().to_bits()
        );
    }
    let mut other = model(Mode::TextOnly, 2);
    assert!(matches!(other.load_checkpoint(&path), Err(xsight::Error::Load(_))));
    assert!(other.load_encoder(&path, "image.").is_err());
}

#[test]
fn encoder_transfer_copies_only_the_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let src = model(Mode::ImageOnly, 8);
    src.save_checkpoint(&path).unwrap();
    let mut dst = model(Mode::Multimodal, 9);
    let before = value(&dst, "decoder.out.weight");
    let n = dst.load_encoder(&path, "image.").unwrap();
    assert_eq!(n, 8);
    assert_eq!(value(&dst, "image.stage1.kernel"), value(&src, "image.stage1.kernel"));
    assert_eq!(value(&dst, "decoder.out.weight"), before);
}

#[test]
fn zero_epoch_pretraining_returns_the_initial_encoder() {
    let img = build_image_submodel(SIDE, 2, 2, 4).unwrap();
    let mut cfg = TrainingConfig::pretrain();
    cfg.epochs = 0;
    let (out, hist) = pretrain_source(img.clone(), &random_samples(6, 1), &cfg, 8).unwrap();
    assert!(hist.is_empty());
    for (_, p) in img.params.iter() {
        let id = out.params.id(&p.name).unwrap();
        assert_eq!(out.params.value(id), &p.value);
    }
}

#[test]
fn one_epoch_lowers_the_training_loss() {
    for mode in Mode::ALL {
        let mut m = model(mode, 13);
        let samples = separable_samples(32, 2);
        let idx: Vec<usize> = (0..32).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let before = evaluate(&m, &refs).unwrap().mean_loss;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_epoch(&mut m, &samples, &idx, 0.05, 8, &mut rng).unwrap();
        let after = evaluate(&m, &refs).unwrap().mean_loss;
        assert!(after < before, "{mode}: {before} → {after}");
    }
}

#[test]
fn fully_frozen_model_does_not_move() {
    let mut m = model(Mode::Multimodal, 3);
    let before = m.store.snapshot("");
    m.set_frozen("", true);
    let samples = random_samples(10, 5);
    let idx: Vec<usize> = (0..10).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_epoch(&mut m, &samples, &idx, 0.5, 4, &mut rng).unwrap();
    assert_eq!(m.store.snapshot(""), before);
}

#[test]
fn untrained_model_is_at_chance_on_unrelated_labels() {
    let samples = random_samples(200, 17);
    let refs: Vec<&Sample> = samples.iter().collect();
    let acc = evaluate(&model(Mode::Multimodal, 6), &refs).unwrap().accuracy;
    assert!((0.38..=0.62).contains(&acc), "accuracy {acc}");
}

#[test]
fn separable_toy_set_is_learned() {
    for mode in Mode::ALL {
        let mut m = model(mode, 31);
        let train = separable_samples(64, 8);
        let test = separable_samples(40, 9);
        let idx: Vec<usize> = (0..64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..60 {
            train_epoch(&mut m, &train, &idx, 0.1, 8, &mut rng).unwrap();
        }
        let refs: Vec<&Sample> = test.iter().collect();
        let acc = evaluate(&m, &refs).unwrap().accuracy;
        assert!(acc > 0.95, "{mode}: {acc}");
    }
}

#[test]
fn fused_vector_keeps_modalities_apart() {
    let m = model(Mode::Multimodal, 4);
    let mut samples = random_samples(2, 6);
    let text_len = 3 * FILTERS;
    let a = m.fused_features(ModelInput::from(&samples[0])).unwrap();
    samples[0].image = samples[1].image.clone();
    let b = m.fused_features(ModelInput::from(&samples[0])).unwrap();
    assert_eq!(a[..text_len], b[..text_len]);
    assert_ne!(a[text_len..], b[text_len..]);
    samples[0].tokens = samples[1].tokens.clone();
    let c = m.fused_features(ModelInput::from(&samples[0])).unwrap();
    assert_eq!(b[text_len..], c[text_len..]);
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let m = model(Mode::Multimodal, 7);
    let before = m.store.snapshot("");
    let samples = random_samples(12, 2);
    let refs: Vec<&Sample> = samples.iter().collect();
    let e1 = evaluate(&m, &refs).unwrap();
    let e2 = evaluate(&m, &refs).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(m.store.snapshot(""), before);
}

#[test]
fn finetune_history_is_deterministic() {
    let samples = separable_samples(30, 3);
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let split = &stratified_split(&labels, 3, 0).unwrap()[0];
    let mut cfg = TrainingConfig::high_rate();
    cfg.epochs = 3;
    let run = || {
        let mut m = model(Mode::Multimodal, 1);
        let h = finetune_target(&mut m, &samples, split, 0, &cfg, &mut |_, _| Ok(())).unwrap();
        (h, m.store.snapshot(""))
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1.len(), 4);
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &h1).unwrap();
    assert_eq!(read_history_csv(&path).unwrap(), h1);
}
