use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        d_model: 8,
        heads: 2,
        ff_mult: 2,
        kernel_size: 3,
        causal_layers: 2,
        noncausal_layers: 1,
        left_context: None,
        max_positions: 16,
        num_languages: 2,
        adapter_hidden: 3,
        adapter_bias: true,
        adapter_after_last: true,
        vocab_size: 5,
        embed_dim: 4,
        joint_dim: 4,
    }
}

fn store(cfg: &ModelConfig, adapters: bool, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_backbone(cfg, &mut s, &mut rng);
    if adapters {
        lda::init_adapters(cfg, &mut s, &mut rng);
    }
    s
}

fn encode(
    cfg: &ModelConfig,
    s: &ParamStore<f64>,
    x: &Tensor<f64>,
    lengths: &[usize],
    langs: Option<&[usize]>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let frozen = |_: &str| false;
    let mut p = ParamBinder::new(s, &frozen);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (a, b) = encode_cascaded(&mut tape, &mut p, cfg, xv, lengths, langs)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

fn input(b: usize, t: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[b, t, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn output_shapes_follow_input() {
    let cfg = tiny_cfg();
    let s = store(&cfg, false, 1);
    let (a, b) = encode(&cfg, &s, &input(2, 7, 6, 2), &[7, 5], None).unwrap();
    assert_eq!(a.shape(), &[2, 7, 8]);
    assert_eq!(b.shape(), &[2, 7, 8]);
    assert!(a.all_finite() && b.all_finite());
}

#[test]
fn first_pass_is_causal_to_the_bit() {
    let cfg = tiny_cfg();
    let s = store(&cfg, true, 3);
    let x = input(1, 9, 6, 4);
    for t0 in [0, 4, 8] {
        let mut y = x.clone();
        for v in &mut y.data_mut()[t0 * 6..(t0 + 1) * 6] {
            *v += 3.0;
        }
        let (a, _) = encode(&cfg, &s, &x, &[9], Some(&[1])).unwrap();
        let (b, _) = encode(&cfg, &s, &y, &[9], Some(&[1])).unwrap();
        assert_eq!(&a.data()[..t0 * 8], &b.data()[..t0 * 8], "perturbing frame {t0}");
        assert_ne!(&a.data()[t0 * 8..], &b.data()[t0 * 8..]);
    }
}

#[test]
fn second_pass_sees_the_future() {
    let cfg = tiny_cfg();
    let s = store(&cfg, false, 5);
    let x = input(1, 9, 6, 6);
    let mut y = x.clone();
    for v in &mut y.data_mut()[8 * 6..] {
        *v += 3.0;
    }
    let (_, a) = encode(&cfg, &s, &x, &[9], None).unwrap();
    let (_, b) = encode(&cfg, &s, &y, &[9], None).unwrap();
    let diff = a.data()[..8].iter().zip(&b.data()[..8]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "frame 0 moved by {diff}");
}

#[test]
fn streaming_prefix_equals_full_sequence_prefix() {
    let cfg = tiny_cfg();
    let s = store(&cfg, true, 7);
    let x = input(1, 10, 6, 8);
    let (full, _) = encode(&cfg, &s, &x, &[10], Some(&[0])).unwrap();
    for len in [1, 4, 7] {
        let prefix = Tensor::new(vec![1, len, 6], x.data()[..len * 6].to_vec()).unwrap();
        let (part, _) = encode(&cfg, &s, &prefix, &[len], Some(&[0])).unwrap();
        assert_eq!(part.data(), &full.data()[..len * 8]);
    }
}

#[test]
fn bounded_left_context_ignores_distant_frames() {
    let cfg = ModelConfig {
        left_context: Some(1),
        causal_layers: 1,
        ..tiny_cfg()
    };
    let s = store(&cfg, false, 9);
    let x = input(1, 8, 6, 10);
    let mut y = x.clone();
    y.data_mut()[0] += 5.0;
    let (a, _) = encode(&cfg, &s, &x, &[8], None).unwrap();
    let (b, _) = encode(&cfg, &s, &y, &[8], None).unwrap();
    // One layer: attention window 1 then kernel 3 carries frame 0 to frame 3.
    assert_eq!(&a.data()[4 * 8..], &b.data()[4 * 8..]);
    assert_ne!(&a.data()[3 * 8..4 * 8], &b.data()[3 * 8..4 * 8]);
    assert_ne!(&a.data()[..8], &b.data()[..8]);
}

#[test]
fn padding_values_do_not_leak() {
    let cfg = tiny_cfg();
    let s = store(&cfg, true, 11);
    let mut x = input(2, 6, 6, 12);
    let (a1, a2) = encode(&cfg, &s, &x, &[6, 3], Some(&[0, 1])).unwrap();
    for v in &mut x.row_mut(1)[3 * 6..] {
        *v = 100.0;
    }
    let (b1, b2) = encode(&cfg, &s, &x, &[6, 3], Some(&[0, 1])).unwrap();
    assert_eq!(a1.row(0), b1.row(0));
    assert_eq!(&a1.row(1)[..3 * 8], &b1.row(1)[..3 * 8]);
    assert_eq!(&a2.row(1)[..3 * 8], &b2.row(1)[..3 * 8]);
    assert_eq!(a2.row(0), b2.row(0));
}

#[test]
fn batch_rows_match_single_utterance_runs() {
    let cfg = tiny_cfg();
    let s = store(&cfg, true, 13);
    let x = input(2, 5, 6, 14);
    let (_, both) = encode(&cfg, &s, &x, &[5, 5], Some(&[1, 0])).unwrap();
    for (b, lang) in [(0, 1), (1, 0)] {
        let one = Tensor::new(vec![1, 5, 6], x.row(b).to_vec()).unwrap();
        let (_, single) = encode(&cfg, &s, &one, &[5], Some(&[lang])).unwrap();
        assert!(single.data().iter().zip(both.row(b)).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}

#[test]
fn zero_initialized_adapters_match_no_adapters() {
    let cfg = tiny_cfg();
    let s = store(&cfg, true, 15);
    let x = input(2, 6, 6, 16);
    let plain = encode(&cfg, &s, &x, &[6, 4], None).unwrap();
    let adapted = encode(&cfg, &s, &x, &[6, 4], Some(&[0, 1])).unwrap();
    assert_eq!(plain.0.data(), adapted.0.data());
    assert_eq!(plain.1.data(), adapted.1.data());
}

#[test]
fn missing_adapters_are_a_config_error() {
    let cfg = tiny_cfg();
    let s = store(&cfg, false, 17);
    let err = encode(&cfg, &s, &input(1, 4, 6, 18), &[4], Some(&[0])).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let s = store(&cfg, true, 17);
    let err = encode(&cfg, &s, &input(1, 4, 6, 18), &[4], Some(&[0, 1])).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn bad_input_shapes_are_dimension_errors() {
    let cfg = tiny_cfg();
    let s = store(&cfg, false, 19);
    assert!(matches!(encode(&cfg, &s, &input(1, 4, 5, 1), &[4], None), Err(Error::Dimension(_))));
    assert!(matches!(encode(&cfg, &s, &input(1, 17, 6, 1), &[17], None), Err(Error::Dimension(_))));
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [tiny_cfg(), ModelConfig::desk_scale()] {
        let s = store(&cfg, false, 21);
        assert_eq!(s.count(|_| true), backbone_param_count(&cfg));
    }
}

#[test]
fn encoding_is_deterministic() {
    let cfg = tiny_cfg();
    let x = input(2, 6, 6, 22);
    let a = encode(&cfg, &store(&cfg, true, 23), &x, &[6, 2], Some(&[1, 1])).unwrap();
    let b = encode(&cfg, &store(&cfg, true, 23), &x, &[6, 2], Some(&[1, 1])).unwrap();
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn causal_mask_respects_lengths() {
    let m: Tensor<f64> = attention_mask(&[2], 3, true, None);
    let open: Vec<bool> = m.data().iter().map(|v| v.is_finite()).collect();
    assert_eq!(open, [true, false, false, true, true, false, true, true, false]);
}
