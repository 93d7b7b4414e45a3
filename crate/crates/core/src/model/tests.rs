use super::*;
use crate::compute::{gradient_check, GradCheckConfig, Graph};
use crate::data::{encode_batch, Batch, MASK};

const V: usize = 40;
const MAX: usize = 10;

fn model(preset: &str, kind: DecoderKind) -> Model {
    Model::init(ArchConfig::preset(preset, V, MAX).unwrap(), kind, 3).unwrap()
}

fn batch(rows: &[&[u32]]) -> Batch {
    encode_batch(rows, MAX + 1).unwrap()
}

#[test]
fn base_count_matches_hand_sum() {
    let c = ArchConfig::preset("base", 85, 10).unwrap();
    // embed 85·64; enc layers 2·(16640 + 33088 + 256); enc norm 128;
    // dec layers 2·(33280 + 33088 + 384); dec norm 128; length head 64·10 + 10
    let expected = 5440 + 2 * 49984 + 128 + 2 * 66752 + 128 + 650;
    assert_eq!(param_count(&c), expected);
    assert_eq!(Model::init(c, DecoderKind::Nat, 0).unwrap().param_count(), expected);
}

#[test]
fn count_formula_matches_every_preset() {
    for name in DESK_PRESETS {
        let c = ArchConfig::preset(name, V, MAX).unwrap();
        for kind in [DecoderKind::At, DecoderKind::Nat] {
            let m = Model::init(c.clone(), kind, 1).unwrap();
            assert_eq!(m.param_count(), param_count(&c), "{name}");
        }
    }
}

#[test]
fn full_big_to_base_ratio() {
    let base = param_count(&ArchConfig::preset("full-base", 37000, 256).unwrap());
    let big = param_count(&ArchConfig::preset("full-big", 37000, 256).unwrap());
    let ratio = big as f64 / base as f64;
    assert!((3.0..=3.8).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_decoder_layers_rejected() {
    let mut c = ArchConfig::preset("base", V, MAX).unwrap();
    c.dec_layers = 0;
    let err = Model::init(c, DecoderKind::Nat, 0).unwrap_err();
    assert!(err.to_string().contains("dec_layers"));
}

#[test]
fn bad_heads_rejected() {
    let mut c = ArchConfig::preset("base", V, MAX).unwrap();
    c.enc_heads = 5;
    assert!(c.validate().unwrap_err().to_string().contains("enc_heads"));
}

#[test]
fn bridge_only_when_widths_differ() {
    assert!(model("cone", DecoderKind::Nat).params.contains("bridge.w"));
    assert!(!model("base", DecoderKind::Nat).params.contains("bridge.w"));
    let cone = model("cone", DecoderKind::Nat);
    let out = cone.encode(&batch(&[&[5, 6, 7]])).unwrap();
    assert_eq!(out.states.shape(), &[1, 3, 128]);
    assert_eq!(out.bridged_states.as_ref().unwrap().shape(), &[1, 3, 32]);
    let logits = cone.decoder_forward(&out, &batch(&[&[MASK, MASK]])).unwrap();
    assert_eq!(logits.shape(), &[1, 2, V]);
}

#[test]
fn equal_seeds_equal_params() {
    let a = model("base", DecoderKind::Nat);
    let b = model("base", DecoderKind::Nat);
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.values(), tb.values());
    }
}

#[test]
fn encode_shape_and_determinism() {
    let m = model("base", DecoderKind::Nat);
    let src = batch(&[&[5, 6, 7]]);
    let a = m.encode(&src).unwrap();
    assert_eq!(a.states.shape(), &[1, 3, 64]);
    assert!(a.bridged_states.is_none());
    let b = m.encode(&src).unwrap();
    assert_eq!(a.states.values(), b.states.values());
}

#[test]
fn over_long_source_rejected() {
    let m = model("base", DecoderKind::Nat);
    let long: Vec<u32> = vec![5; MAX + 1];
    let src = encode_batch(&[long], MAX + 1).unwrap();
    assert!(matches!(m.encode(&src), Err(crate::Error::SequenceTooLong { .. })));
}

#[test]
fn batch_permutation_commutes() {
    let m = model("base", DecoderKind::Nat);
    let s1: &[u32] = &[5, 6, 7, 8];
    let s2: &[u32] = &[9, 10, 11, 12];
    let a = m.encode(&batch(&[s1, s2])).unwrap();
    let b = m.encode(&batch(&[s2, s1])).unwrap();
    let d = 4 * 64;
    let close = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-5);
    assert!(close(&a.states.values()[..d], &b.states.values()[d..]));
    assert!(close(&a.states.values()[d..], &b.states.values()[..d]));
}

fn row(t: &crate::compute::Tensor, b: usize, pos: usize) -> Vec<f32> {
    let s = t.shape();
    let (len, v) = (s[1], s[2]);
    t.values()[(b * len + pos) * v..][..v].to_vec()
}

#[test]
fn at_decoder_is_causal() {
    let m = model("base", DecoderKind::At);
    let enc = m.encode(&batch(&[&[5, 6, 7]])).unwrap();
    let a = m.decoder_forward(&enc, &batch(&[&[1, 8, 9, 10]])).unwrap();
    let b = m.decoder_forward(&enc, &batch(&[&[1, 8, 20, 21]])).unwrap();
    for pos in 0..2 {
        assert_eq!(row(&a, 0, pos), row(&b, 0, pos));
    }
    assert_ne!(row(&a, 0, 2), row(&b, 0, 2));
}

#[test]
fn at_decoder_rejects_mask() {
    let m = model("base", DecoderKind::At);
    let enc = m.encode(&batch(&[&[5, 6, 7]])).unwrap();
    assert!(m.decoder_forward(&enc, &batch(&[&[1, MASK]])).is_err());
}

#[test]
fn nat_decoder_is_bidirectional() {
    let m = model("base", DecoderKind::Nat);
    let enc = m.encode(&batch(&[&[5, 6, 7, 8, 9]])).unwrap();
    let a = m
        .decoder_forward(&enc, &batch(&[&[MASK, MASK, MASK, MASK, 12]]))
        .unwrap();
    let b = m
        .decoder_forward(&enc, &batch(&[&[MASK, MASK, MASK, MASK, 30]]))
        .unwrap();
    assert_ne!(row(&a, 0, 0), row(&b, 0, 0));
}

#[test]
fn padded_source_positions_are_ignored() {
    let m = model("cone", DecoderKind::Nat);
    let src_a = batch(&[&[5, 6], &[7, 8, 9, 10]]);
    let mut src_b = src_a.clone();
    src_b.ids[2] = 33;
    src_b.ids[3] = 34;
    let tgt = batch(&[&[MASK, MASK, MASK], &[MASK, MASK, MASK]]);
    let la = m.decoder_forward(&m.encode(&src_a).unwrap(), &tgt).unwrap();
    let lb = m.decoder_forward(&m.encode(&src_b).unwrap(), &tgt).unwrap();
    for pos in 0..3 {
        assert_eq!(row(&la, 0, pos), row(&lb, 0, pos));
    }
}

#[test]
fn length_prediction_contract() {
    let m = model("base", DecoderKind::Nat);
    let enc = m.encode(&batch(&[&[5, 6, 7], &[8, 9]])).unwrap();
    let dist = m.length_distribution(&enc).unwrap();
    for d in &dist {
        assert_eq!(d.len(), MAX);
        assert!((d.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let one = m.predict_length(&enc, 1).unwrap();
    let argmax = dist[0]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    assert_eq!(
        one[0],
        vec![LengthCandidate {
            len: argmax + 1,
            log_prob: one[0][0].log_prob
        }]
    );
    let five = m.predict_length(&enc, 5).unwrap();
    for cands in &five {
        assert_eq!(cands.len(), 5);
        let mut lens: Vec<usize> = cands.iter().map(|c| c.len).collect();
        lens.dedup();
        lens.sort();
        lens.dedup();
        assert_eq!(lens.len(), 5);
        assert!(cands.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }
    assert!(m.predict_length(&enc, MAX + 1).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model("cone", DecoderKind::At);
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.kind, m.kind);
    for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(a.values(), b.values());
    }
}

/// Token cross-entropy over all positions plus the length loss.
pub(crate) fn full_loss(
    m: &Model,
    g: &mut Graph,
    params: &crate::compute::ParameterSet,
) -> crate::Result<crate::compute::Var> {
    let view = Model {
        config: m.config.clone(),
        kind: m.kind,
        params: params.clone(),
    };
    let src = batch(&[&[5, 6, 7], &[8, 9]]);
    let tgt = batch(&[&[10, MASK, 12], &[MASK, 14]]);
    let mut noise = Noise::off();
    let enc = view.encode_in(g, &src, &mut noise)?;
    let logits = view.decode_in(g, &enc, &tgt, &mut noise)?;
    let targets: Vec<u32> = vec![10, 11, 12, 13, 14, 0];
    let weights: Vec<f32> = tgt.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let ce = g.cross_entropy(logits, &targets, &weights, 0.1)?;
    let len_logits = view.length_logits_in(g, &enc)?;
    let len_ce = g.cross_entropy(len_logits, &[2, 1], &[1.0, 1.0], 0.0)?;
    let len_ce = g.scale(len_ce, 0.1)?;
    g.add(ce, len_ce)
}

#[test]
fn base_model_gradients_match_finite_differences() {
    let m = model("base", DecoderKind::Nat);
    let cfg = GradCheckConfig {
        max_coords: Some(4),
        ..Default::default()
    };
    let report = gradient_check(&m.params, |g, p| full_loss(&m, g, p), cfg).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn lm_scores_every_token_plus_eos() {
    let lm = TinyLm::init(LmConfig::small(V, MAX), 0).unwrap();
    let lp = lm.token_log_probs(&[vec![5u32, 6, 7], vec![8]]).unwrap();
    assert_eq!(lp[0].len(), 4);
    assert_eq!(lp[1].len(), 2);
    assert!(lp.iter().flatten().all(|&x| x < 0.0 && x.is_finite()));
}
