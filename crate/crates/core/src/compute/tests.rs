use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn params_with(entries: &[(&str, Vec<usize>)], seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new(seed);
    for (name, shape) in entries {
        p.insert(*name, Tensor::uniform(shape, 1.0, &mut rng)).unwrap();
    }
    p
}

/// Projects a node onto fixed pseudo-random weights so every output
/// element influences the scalar loss differently.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var, crate::Error> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(shape, w)?;
    let prod = g.mul(v, w)?;
    g.sum(prod)
}

fn check(params: &ParameterSet, f: impl FnMut(&mut Graph, &ParameterSet) -> Result<Var, crate::Error>) {
    let report = gradient_check(params, f, GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "gradient check failed: {:?}", report.worst());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f32> = (0..40).map(|_| rng.gen_range(-20.0..20.0)).collect();
    let mut g = Graph::new();
    let x = g.constant(vec![5, 8], vals).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.value(y).chunks(8) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identity_matmul() {
    let a: Vec<f32> = (0..9).map(|i| i as f32 * 0.5 - 2.0).collect();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let mut g = Graph::new();
    let i3 = g.constant(vec![3, 3], eye).unwrap();
    let av = g.constant(vec![3, 3], a.clone()).unwrap();
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), &a[..]);
}

#[test]
fn layer_norm_matches_hand_formula() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let gain = g.constant(vec![3], vec![1.0; 3]).unwrap();
    let bias = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    // mean 2, variance 2/3, eps 1e-5
    let r = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
    let want = [-r, 0.0, r];
    for (got, want) in g.value(y).iter().zip(want) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
    let out = g.value(y);
    let mean: f32 = out.iter().sum::<f32>() / 3.0;
    let var: f32 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 3.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_finite_input_rejected() {
    let mut g = Graph::new();
    assert!(matches!(
        g.constant(vec![2], vec![1.0, f32::NAN]),
        Err(crate::Error::NonFinite { .. })
    ));
}

#[test]
fn grad_of_sum_is_ones() {
    let p = params_with(&[("p", vec![2, 3])], 1);
    let mut g = Graph::new();
    let v = g.param(&p, "p").unwrap();
    let s = g.sum(v).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("p").unwrap(), &[1.0; 6]);
}

#[test]
fn grad_of_half_square_is_identity() {
    let p = params_with(&[("p", vec![4])], 2);
    let mut g = Graph::new();
    let v = g.param(&p, "p").unwrap();
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.get("p").unwrap(), p.get("p").unwrap().values());
}

#[test]
fn backward_without_graph_rejected() {
    let mut g = Graph::new();
    let c = g.constant(vec![1], vec![3.0]).unwrap();
    assert!(matches!(g.backward(c), Err(crate::Error::NoGraph)));
    let p = params_with(&[("p", vec![1])], 0);
    let v = g.param(&p, "p").unwrap();
    assert!(matches!(g.backward(v), Err(crate::Error::NoGraph)));
}

#[test]
fn grads_accumulate_until_zeroed() {
    let mut p = params_with(&[("p", vec![3])], 4);
    for _ in 0..2 {
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap().accumulate_into(&mut p).unwrap();
    }
    assert_eq!(p.get("p").unwrap().grad().unwrap(), &[2.0; 3]);
    p.zero_grad();
    assert!(p.get("p").unwrap().grad().is_none());
}

#[test]
fn zero_parameter_check_is_empty_pass() {
    let p = ParameterSet::new(0);
    let report = gradient_check(&p, |g, _| g.constant(vec![1], vec![0.0]), GradCheckConfig::default()).unwrap();
    assert!(report.entries.is_empty());
    assert!(report.passed());
}

#[test]
fn cross_entropy_without_smoothing_is_neg_log_softmax() {
    let logits = vec![0.3f32, -1.2, 2.0, 0.5];
    let mut g = Graph::new();
    let l = g.constant(vec![1, 4], logits.clone()).unwrap();
    let ce = g.cross_entropy(l, &[1], &[1.0], 0.0).unwrap();
    let lse = logits.iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
    let want = lse - logits[1] as f64;
    assert!((g.value(ce)[0] as f64 - want).abs() < 1e-6);
}

#[test]
fn masked_attention_weights_are_exactly_zero() {
    let p = params_with(&[("q", vec![3, 4]), ("k", vec![3, 4]), ("v", vec![3, 4])], 9);
    let mut g = Graph::new();
    let (q, k) = (g.param(&p, "q").unwrap(), g.param(&p, "k").unwrap());
    let v = g.param(&p, "v").unwrap();
    // key 2 hidden from every query
    let mask: Vec<f32> = (0..9).map(|i| if i % 3 == 2 { MASK_NEG } else { 0.0 }).collect();
    let geo = AttnShape {
        batch: 1,
        q_len: 3,
        k_len: 3,
        heads: 2,
    };
    let out = g.attention(q, k, v, &mask, geo).unwrap();
    // perturbing the hidden key/value must not change the output
    let mut p2 = p.clone();
    p2.get_mut("k").unwrap().values_mut()[8] += 5.0;
    p2.get_mut("v").unwrap().values_mut()[9] -= 3.0;
    let mut g2 = Graph::new();
    let (q2, k2) = (g2.param(&p2, "q").unwrap(), g2.param(&p2, "k").unwrap());
    let v2 = g2.param(&p2, "v").unwrap();
    let out2 = g2.attention(q2, k2, v2, &mask, geo).unwrap();
    assert_eq!(g.value(out), g2.value(out2));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let p = params_with(&[("w", vec![4, 5]), ("x", vec![3, 4])], 11);
        let mut g = Graph::new();
        let (w, x) = (g.param(&p, "w").unwrap(), g.param(&p, "x").unwrap());
        let y = g.matmul(x, w).unwrap();
        let y = g.relu(y).unwrap();
        let l = project(&mut g, y, 5).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).to_vec(), grads.get("w").unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

mod gradients {
    use super::*;

    #[test]
    fn matmul() {
        let p = params_with(&[("a", vec![3, 4]), ("b", vec![4, 2])], 21);
        check(&p, |g, p| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let y = g.matmul(a, b)?;
            project(g, y, 1)
        });
    }

    #[test]
    fn matmul_transposed() {
        let p = params_with(&[("a", vec![3, 4]), ("b", vec![5, 4])], 22);
        check(&p, |g, p| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let y = g.matmul_nt(a, b)?;
            project(g, y, 2)
        });
    }

    #[test]
    fn linear_layer() {
        let p = params_with(&[("x", vec![4, 6]), ("w", vec![6, 3]), ("b", vec![3])], 23);
        check(&p, |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.linear(x, w, Some(b))?;
            project(g, y, 3)
        });
    }

    #[test]
    fn add_broadcast_scale_relu() {
        let p = params_with(&[("a", vec![3, 4]), ("r", vec![4]), ("c", vec![3, 4])], 24);
        check(&p, |g, p| {
            let (a, r, c) = (g.param(p, "a")?, g.param(p, "r")?, g.param(p, "c")?);
            let y = g.add_broadcast(a, r)?;
            let y = g.add(y, c)?;
            let y = g.scale(y, 1.7)?;
            let y = g.relu(y)?;
            project(g, y, 4)
        });
    }

    #[test]
    fn softmax() {
        let p = params_with(&[("a", vec![3, 5])], 25);
        check(&p, |g, p| {
            let a = g.param(p, "a")?;
            let y = g.softmax(a)?;
            project(g, y, 5)
        });
    }

    #[test]
    fn layer_norm() {
        let p = params_with(&[("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])], 26);
        check(&p, |g, p| {
            let (x, gn, b) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
            let y = g.layer_norm(x, gn, b)?;
            project(g, y, 6)
        });
    }

    #[test]
    fn embedding_and_gather() {
        let p = params_with(&[("e", vec![5, 3])], 27);
        check(&p, |g, p| {
            let e = g.param(p, "e")?;
            let y = g.embedding(e, &[4, 0, 4, 2])?;
            let y = g.gather_rows(y, &[1, 1, 3, 0, 2])?;
            project(g, y, 7)
        });
    }

    #[test]
    fn attention_with_mask() {
        let p = params_with(&[("q", vec![6, 4]), ("k", vec![8, 4]), ("v", vec![8, 4])], 28);
        // batch 2, q_len 3, k_len 4; second sequence has one padded key
        let mut mask = vec![0.0f32; 2 * 3 * 4];
        for i in 0..3 {
            mask[12 + i * 4 + 3] = MASK_NEG;
        }
        mask[1] = MASK_NEG; // causal-style hole in the first sequence
        check(&p, |g, p| {
            let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
            let y = g.attention(
                q,
                k,
                v,
                &mask,
                AttnShape {
                    batch: 2,
                    q_len: 3,
                    k_len: 4,
                    heads: 2,
                },
            )?;
            project(g, y, 8)
        });
    }

    #[test]
    fn cross_entropy_with_smoothing() {
        let p = params_with(&[("l", vec![4, 6])], 29);
        check(&p, |g, p| {
            let l = g.param(p, "l")?;
            g.cross_entropy(l, &[0, 5, 2, 2], &[1.0, 0.0, 2.0, 1.0], 0.1)
        });
    }

    #[test]
    fn mean_pool_and_concat() {
        let p = params_with(&[("x", vec![6, 3]), ("y", vec![2, 2])], 30);
        let mask = [true, true, false, true, false, false];
        check(&p, |g, p| {
            let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
            let pooled = g.mean_pool_masked(x, &mask, 2)?;
            let cat = g.concat(&[pooled, y])?;
            project(g, cat, 9)
        });
    }

    #[test]
    fn dropout_with_fixed_mask() {
        let p = params_with(&[("x", vec![4, 4])], 31);
        check(&p, |g, p| {
            let x = g.param(p, "x")?;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let y = g.dropout(x, 0.3, &mut rng)?;
            project(g, y, 10)
        });
    }
}
