//! Central-difference certification of every differentiable primitive.

use prompt_diffuser::numerics::gradcheck::{central_difference, max_relative_error};
use prompt_diffuser::numerics::layers::{affine, CausalSelfAttention};
use prompt_diffuser::numerics::{grad, Graph, ParamSet, Tensor, Var};
use prompt_diffuser::rng;
use prompt_diffuser::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    let mut r = rng::derived(seed, stream);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, n)).unwrap()
}

/// Contracts an arbitrary output with a fixed random tensor so every output
/// element contributes to the scalar loss.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random(&shape, seed, 999));
    let p = g.mul(out, w)?;
    Ok(g.mean(p))
}

fn certify<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut ps = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            ps.add(format!("p{i}"), random(s, seed, i as u64)).unwrap();
        }
        let (_, analytic) = grad(&ps, |g, v| {
            let out = build(g, v)?;
            contract(g, out, seed)
        })
        .unwrap();
        let numeric = central_difference(&ps, EPS, |p| {
            let mut g = Graph::new();
            let v = g.bind(p);
            let out = build(&mut g, &v)?;
            let l = contract(&mut g, out, seed)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn affine_gradient() {
    certify("affine", &[&[3, 4], &[4, 5], &[5]], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        g.add_row(h, v[2])
    });
}

#[test]
fn elementwise_gradients() {
    certify("add/sub/mul/scale", &[&[3, 4], &[3, 4]], |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(v[0], v[1])?;
        let c = g.mul(a, b)?;
        Ok(g.scale(c, -0.7))
    });
}

#[test]
fn mish_gradient() {
    certify("mish", &[&[4, 6]], |g, v| {
        let x = g.scale(v[0], 3.0);
        Ok(g.mish(x))
    });
}

#[test]
fn gelu_gradient() {
    certify("gelu", &[&[4, 6]], |g, v| {
        let x = g.scale(v[0], 3.0);
        Ok(g.gelu(x))
    });
}

#[test]
fn tanh_gradient() {
    certify("tanh", &[&[4, 6]], |g, v| Ok(g.tanh(v[0])));
}

#[test]
fn layer_norm_gradient() {
    certify("layer_norm", &[&[5, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn softmax_gradient() {
    certify("softmax", &[&[4, 5]], |g, v| Ok(g.softmax(v[0])));
}

#[test]
fn embedding_lookup_gradient() {
    certify("gather", &[&[6, 4]], |g, v| {
        g.gather(v[0], &[0, 3, 3, 5, 1, 0])
    });
}

#[test]
fn shape_op_gradients() {
    certify(
        "concat/slice/transpose/reshape",
        &[&[2, 3], &[4, 3], &[6, 2]],
        |g, v| {
            let r = g.concat_rows(&[v[0], v[1]])?;
            let c = g.concat_cols(&[r, v[2]])?;
            let s = g.slice_cols(c, 1, 3)?;
            let t = g.transpose(s);
            g.reshape(t, &[2, 9])
        },
    );
}

#[test]
fn clamp_gradient_inside_bounds() {
    certify("clamp", &[&[3, 3]], |g, v| Ok(g.clamp(v[0], -100.0, 100.0)));
}

#[test]
fn mse_gradient() {
    certify("mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1]));
}

#[test]
fn causal_attention_gradient() {
    // 4 tokens, width 8, two heads, two sequences.
    certify("causal_attention", &[&[8, 8], &[8, 8], &[8, 8]], |g, v| {
        g.causal_attention(v[0], v[1], v[2], 2, 4, 2)
    });
}

#[test]
fn attention_block_gradient() {
    let mut r = rng::seeded(3);
    let mut layout = ParamSet::new();
    let block = CausalSelfAttention::new(&mut layout, "a", 8, 2, &mut r).unwrap();
    let shapes: Vec<Vec<usize>> = layout.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut all: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    all.push(&[4, 8]);
    let n = shapes.len();
    certify("attention block", &all, |g, v| {
        block.forward(g, &v[..n], v[n], 1, 4)
    });
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[3, 4], 1, 0);
    let b = random(&[4, 2], 1, 1);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((c.at(i, j) - s).abs() < 1e-12);
        }
    }
    let bias = Tensor::vector(vec![0.5, -1.0]);
    let y = affine(&a, &b, &bias).unwrap();
    assert!((y.at(2, 1) - (c.at(2, 1) - 1.0)).abs() < 1e-12);
}

fn attention_out(x: &Tensor) -> Tensor {
    let mut r = rng::seeded(9);
    let mut ps = ParamSet::new();
    let block = CausalSelfAttention::new(&mut ps, "a", 8, 2, &mut r).unwrap();
    let mut g = Graph::new();
    let vars = g.bind_frozen(&ps);
    let xv = g.constant(x.clone());
    let out = block.forward(&mut g, &vars, xv, 1, x.rows()).unwrap();
    g.value(out).clone()
}

#[test]
fn single_token_attention_is_value_projection() {
    let x = random(&[1, 8], 4, 0);
    let mut r = rng::seeded(9);
    let mut ps = ParamSet::new();
    let block = CausalSelfAttention::new(&mut ps, "a", 8, 2, &mut r).unwrap();
    let qkv = affine(&x, ps.get(block.qkv.w), ps.get(block.qkv.b)).unwrap();
    let v = Tensor::matrix(1, 8, qkv.data()[16..24].to_vec()).unwrap();
    let expected = affine(&v, ps.get(block.proj.w), ps.get(block.proj.b)).unwrap();
    let got = attention_out(&x);
    for (a, b) in got.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_causal() {
    let x = random(&[5, 8], 5, 0);
    let base = attention_out(&x);
    for t in 0..5 {
        let mut y = x.clone();
        y.data_mut()[t * 8 + 3] += 0.5;
        let out = attention_out(&y);
        assert_eq!(&out.data()[..t * 8], &base.data()[..t * 8], "position {t}");
        assert_ne!(&out.data()[t * 8..], &base.data()[t * 8..]);
    }
}

#[test]
fn dropout_mask_gradient_matches_mask() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::full(&[1, 1000], 1.0));
    let mut r = rng::seeded(0);
    let d = g.dropout(x, 0.1, &mut r).unwrap();
    let l = g.mean(d);
    let grads = g.backward(l).unwrap();
    let gx = grads.get_or_zeros(x);
    for (o, gi) in g.value(d).data().iter().zip(gx.data()) {
        assert!((o / 1000.0 - gi).abs() < 1e-15);
    }
    let kept = g.value(d).data().iter().filter(|v| **v > 0.0).count();
    assert!((850..950).contains(&kept), "{kept}");
}
