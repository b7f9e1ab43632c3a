mod common;

use common::*;
use crosstill::encoder::*;
use crosstill::error::Error;
use crosstill::Rng;
use proptest::prelude::*;

#[test]
fn recurrence_matches_unrolled_layers() {
    for m in [1, 2, 4] {
        for r in [1, 2, 3] {
            let check = recurrence_check(m, r, (10 * m + r) as u64);
            assert!(check.forward_bitwise, "M={m} r={r}: forward differs");
            assert!(check.max_grad_diff <= 1e-10, "M={m} r={r}: gradient diff {}", check.max_grad_diff);
        }
    }
}

#[test]
fn bottleneck_shapes_and_names() {
    let e = perturbed_encoder(small_encoder(2, 3), 1);
    let shape = |n: &str| e.params().get(e.params().find(n).unwrap()).shape().to_vec();
    assert_eq!(shape("embeddings.word"), vec![30, 4]);
    assert_eq!(shape("embeddings.projection"), vec![4, 8]);
    assert_eq!(shape("embeddings.position"), vec![10, 8]);
    assert!(e.params().find("layers.2.attention.query.weight").is_none());
    let names: Vec<String> = e.params().iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, parameter_names(e.config()));
    let unbottled = EncoderConfig { bottleneck_enabled: false, ..small_encoder(1, 1) };
    let plain = perturbed_encoder(unbottled, 1);
    assert!(plain.params().find("embeddings.projection").is_none());
}

#[test]
fn padding_does_not_change_embeddings() {
    let e = perturbed_encoder(small_encoder(2, 2), 3);
    let short = vec![5, 9, 12];
    let alone = e.embed_sentences(std::slice::from_ref(&short), 8).unwrap();
    let padded = e.embed_sentences(&[short, vec![7; 8], vec![4]], 8).unwrap();
    for (a, b) in alone[0].iter().zip(&padded[0]) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn embedding_is_independent_of_inference_batch_size() {
    let e = perturbed_encoder(small_encoder(1, 2), 4);
    let sentences: Vec<Vec<usize>> = (0..7).map(|i| vec![4 + i, 5 + 2 * i, 6]).collect();
    let one = e.embed_sentences(&sentences, 1).unwrap();
    let all = e.embed_sentences(&sentences, 64).unwrap();
    for (a, b) in one.iter().flatten().zip(all.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn a_single_token_sentence_has_a_finite_embedding() {
    let e = perturbed_encoder(small_encoder(1, 1), 6);
    let v = e.embed_sentences(&[vec![4]], 1).unwrap();
    assert_eq!(v[0].len(), 8);
    assert!(v[0].iter().all(|x| x.is_finite()));
}

#[test]
fn checkpoint_round_trip_is_exact_at_32_bit() {
    let e = perturbed_encoder(small_encoder(2, 2), 8).cast::<f32>();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&e, &path).unwrap();
    let back: SentenceEncoder<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), e.config());
    for (a, b) in back.params().iter().zip(e.params().iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.bitwise_eq(&b.tensor), "{}", a.name);
    }
    assert_eq!(write_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
    let wide: SentenceEncoder<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(wide.cast::<f32>(), back);
}

fn expect_format(bytes: &[u8], offset: u64) {
    match read_checkpoint::<f32>(bytes) {
        Err(Error::Format { offset: got, .. }) => assert_eq!(got, offset),
        Err(e) => panic!("expected a format error at {offset}, got {e}"),
        Ok(_) => panic!("expected a format error at {offset}, got a model"),
    }
}

#[test]
fn corrupted_checkpoints_report_byte_offsets() {
    let e = perturbed_encoder(small_encoder(1, 1), 9).cast::<f32>();
    let good = write_checkpoint(&e).unwrap();
    assert_eq!(&good[..5], MAGIC);

    let mut bad = good.clone();
    bad[0] = b'Y';
    expect_format(&bad, 0);

    let mut bad = good.clone();
    bad[5..9].copy_from_slice(&7u32.to_le_bytes());
    expect_format(&bad, 5);

    let config_len = u64::from_le_bytes(good[9..17].try_into().unwrap()) as usize;
    let count_at = 17 + config_len;
    let mut bad = good.clone();
    bad[count_at..count_at + 8].copy_from_slice(&99u64.to_le_bytes());
    expect_format(&bad, count_at as u64);

    // first tensor name starts right after the count
    let name_at = count_at + 8;
    let mut bad = good.clone();
    bad[name_at + 4] ^= 0x20;
    expect_format(&bad, name_at as u64);

    // the last tensor is an 8-wide norm bias; a short file fails where its payload starts
    expect_format(&good[..good.len() - 3], (good.len() - 8 * 4) as u64);
}

#[test]
fn truncation_and_trailing_bytes_are_rejected() {
    let e = perturbed_encoder(small_encoder(1, 1), 9).cast::<f32>();
    let good = write_checkpoint(&e).unwrap();
    for cut in [3, 12, good.len() / 2, good.len() - 1] {
        assert!(matches!(read_checkpoint::<f32>(&good[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut long = good.clone();
    long.extend_from_slice(&[0, 0]);
    expect_format(&long, good.len() as u64);
}

#[test]
fn student_initialization_copies_the_right_tensors() {
    let assistant = perturbed_encoder(EncoderConfig { bottleneck_enabled: false, ..small_encoder(4, 1) }, 11);
    let student_cfg = EncoderConfig { max_positions: 6, ..small_encoder(2, 3) };
    let student = init_student_from_assistant(&assistant, student_cfg, &mut Rng::new(1)).unwrap();
    let get = |e: &SentenceEncoder<f64>, n: &str| e.params().get(e.params().find(n).unwrap()).clone();
    for name in parameter_names(student.config()) {
        let s = get(&student, &name);
        if name.starts_with("layers.") || name.starts_with("embeddings.norm") {
            assert!(s.bitwise_eq(&get(&assistant, &name)), "{name} not copied");
        } else if name == "embeddings.position" {
            let a = get(&assistant, &name);
            assert_eq!(s.data(), &a.data()[..6 * 8]);
        } else {
            assert_eq!(s.shape(), if name == "embeddings.word" { &[30, 4][..] } else { &[4, 8][..] });
        }
    }
    let too_deep = small_encoder(5, 1);
    assert!(matches!(
        init_student_from_assistant(&assistant, too_deep, &mut Rng::new(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn unbottlenecked_student_copies_the_word_table() {
    let plain = |m| EncoderConfig { bottleneck_enabled: false, ..small_encoder(m, 1) };
    let assistant = perturbed_encoder(plain(2), 12);
    let student = init_student_from_assistant(&assistant, plain(1), &mut Rng::new(2)).unwrap();
    let word = |e: &SentenceEncoder<f64>| e.params().get(e.params().find("embeddings.word").unwrap()).clone();
    assert!(word(&student).bitwise_eq(&word(&assistant)));
}

#[test]
fn recurrent_assistant_is_unrolled_before_copying() {
    let assistant = perturbed_encoder(EncoderConfig { bottleneck_enabled: false, ..small_encoder(1, 3) }, 13);
    let student = init_student_from_assistant(&assistant, small_encoder(3, 1), &mut Rng::new(3)).unwrap();
    let get = |e: &SentenceEncoder<f64>, n: &str| e.params().get(e.params().find(n).unwrap()).clone();
    for i in 0..3 {
        let name = format!("layers.{i}.ffn.output.weight");
        assert!(get(&student, &name).bitwise_eq(&get(&assistant, "layers.0.ffn.output.weight")));
    }
}

#[test]
fn fresh_encoders_start_with_zero_positions() {
    let e = SentenceEncoder::<f64>::new(small_encoder(1, 1), &mut Rng::new(0)).unwrap();
    let pos = e.params().get(e.params().find("embeddings.position").unwrap());
    assert!(pos.data().iter().all(|&x| x == 0.0));
    let word = e.params().get(e.params().find("embeddings.word").unwrap());
    let var = word.data().iter().map(|x| x * x).sum::<f64>() / word.len() as f64;
    assert!((var.sqrt() - INIT_STD).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn recurrence_never_adds_parameters(m in 1usize..4, r in 1usize..5, b in 1usize..6) {
        let cfg = |r| EncoderConfig { bottleneck_size: b, ..small_encoder(m, r) };
        let rng = &mut Rng::new(0);
        let once = SentenceEncoder::<f32>::new(cfg(1), rng).unwrap();
        let many = SentenceEncoder::<f32>::new(cfg(r), rng).unwrap();
        prop_assert_eq!(once.parameter_count(), many.parameter_count());
    }
}
