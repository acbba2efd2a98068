//! Finite-difference verification of every differentiable operation and of
//! the full composite loss through extractor, assembly, encoder, and head.
//!
//! All checks run in f64 with central differences at h = 1e-5 and require
//! max relative error below 1e-6 over at least 20 random points per op.

use mmvqa_core::model::{
    assemble_sequence, bind_network, encoder_forward, mlm_logits, vqa_logits, ModelConfig,
    MultimodalSequence, Network, Phase,
};
use mmvqa_core::tape::IGNORE_INDEX;
use mmvqa_core::tensor::Tensor;
use mmvqa_core::vision::{encode_chw, FeatureMode};
use mmvqa_core::{grad_check, Tape, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const POINTS: usize = 20;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Nudge values away from zero so kinked ops (relu) stay differentiable at
/// the sampled point.
fn away_from_zero(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.1 * if *v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    t
}

/// Weighted-sum readout so softmax-style row constraints cannot cancel.
fn readout(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var, mmvqa_core::NumericsError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn check(name: &str, err: f64) {
    assert!(err < TOL, "{name}: max relative error {err:.3e} >= {TOL:.0e}");
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for round in 0..POINTS {
        let b = randn(&mut rng, vec![3, 4]);
        let w34 = randn(&mut rng, vec![3, 4]);
        let w24 = randn(&mut rng, vec![2, 4]);
        let w23 = randn(&mut rng, vec![2, 3]);
        let bias = randn(&mut rng, vec![4]);

        // matmul w.r.t. left operand
        let point = randn(&mut rng, vec![2, 3]);
        let bc = b.clone();
        let wc = w24.clone();
        let err = grad_check(&point, H, |t, x| {
            let bv = t.constant(bc.clone());
            let y = t.matmul(x, bv)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("matmul/lhs", err);

        // matmul w.r.t. right operand
        let point = randn(&mut rng, vec![3, 4]);
        let ac = randn(&mut rng, vec![2, 3]);
        let wc = w24.clone();
        let err = grad_check(&point, H, |t, x| {
            let av = t.constant(ac.clone());
            let y = t.matmul(av, x)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("matmul/rhs", err);

        // transpose
        let point = randn(&mut rng, vec![2, 3]);
        let wc = randn(&mut rng, vec![3, 2]);
        let err = grad_check(&point, H, |t, x| {
            let y = t.transpose(x)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("transpose", err);

        // add / mul (elementwise)
        let point = randn(&mut rng, vec![3, 4]);
        let other = randn(&mut rng, vec![3, 4]);
        let (oc, wc) = (other.clone(), w34.clone());
        let err = grad_check(&point, H, |t, x| {
            let o = t.constant(oc.clone());
            let y = t.add(x, o)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("add", err);
        let (oc, wc) = (other.clone(), w34.clone());
        let err = grad_check(&point, H, |t, x| {
            let o = t.constant(oc.clone());
            let y = t.mul(o, x)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("mul", err);

        // add_bias w.r.t. matrix and bias
        let (bc2, wc) = (bias.clone(), w34.clone());
        let err = grad_check(&point, H, |t, x| {
            let bv = t.constant(bc2.clone());
            let y = t.add_bias(x, bv)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("add_bias/x", err);
        let xc = randn(&mut rng, vec![3, 4]);
        let wc = w34.clone();
        let err = grad_check(&bias, H, |t, bv| {
            let x = t.constant(xc.clone());
            let y = t.add_bias(x, bv)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("add_bias/bias", err);

        // scale, relu, gelu
        let wc = w34.clone();
        let err = grad_check(&point, H, |t, x| {
            let y = t.scale(x, -1.7)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("scale", err);
        let safe = away_from_zero(randn(&mut rng, vec![3, 4]));
        let wc = w34.clone();
        let err = grad_check(&safe, H, |t, x| {
            let y = t.relu(x)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("relu", err);
        let wc = w34.clone();
        let err = grad_check(&point, H, |t, x| {
            let y = t.gelu(x)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("gelu", err);

        // softmax along both axes
        for axis in [0usize, 1] {
            let wc = w34.clone();
            let err = grad_check(&point, H, |t, x| {
                let y = t.softmax(x, axis)?;
                readout(t, y, &wc)
            })
            .unwrap();
            check("softmax", err);
        }

        // masked softmax
        let wc = w34.clone();
        let err = grad_check(&point, H, |t, x| {
            let y = t.masked_softmax(x, &[true, false, true, true])?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("masked_softmax", err);

        // layer_norm w.r.t. x, gamma, beta
        let gamma = randn(&mut rng, vec![4]);
        let beta = randn(&mut rng, vec![4]);
        let (gc, bc3, wc) = (gamma.clone(), beta.clone(), w34.clone());
        let err = grad_check(&point, H, |t, x| {
            let g = t.constant(gc.clone());
            let b = t.constant(bc3.clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("layer_norm/x", err);
        let (xc, bc3, wc) = (randn(&mut rng, vec![3, 4]), beta.clone(), w34.clone());
        let err = grad_check(&gamma, H, |t, g| {
            let x = t.constant(xc.clone());
            let b = t.constant(bc3.clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("layer_norm/gamma", err);
        let (xc, gc, wc) = (randn(&mut rng, vec![3, 4]), gamma.clone(), w34.clone());
        let err = grad_check(&beta, H, |t, b| {
            let x = t.constant(xc.clone());
            let g = t.constant(gc.clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("layer_norm/beta", err);

        // cross entropy (with an ignored row on odd rounds)
        let logits = randn(&mut rng, vec![3, 5]);
        let targets = if round % 2 == 0 {
            vec![1usize, 4, 0]
        } else {
            vec![1usize, IGNORE_INDEX, 3]
        };
        let tg = targets.clone();
        let err = grad_check(&logits, H, move |t, x| t.cross_entropy(x, &tg)).unwrap();
        check("cross_entropy", err);

        // sum, gather, concat/slice, masked mean, reshape
        let err = grad_check(&point, H, |t, x| t.sum(x)).unwrap();
        check("sum", err);
        let wc = randn(&mut rng, vec![4, 4]);
        let err = grad_check(&point, H, |t, x| {
            let y = t.gather(x, &[2, 0, 2, 1])?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("gather", err);
        let (oc, wc) = (randn(&mut rng, vec![2, 4]), randn(&mut rng, vec![5, 4]));
        let err = grad_check(&point, H, |t, x| {
            let o = t.constant(oc.clone());
            let y = t.concat_rows(&[x, o])?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("concat_rows", err);
        let wc = randn(&mut rng, vec![3, 2]);
        let err = grad_check(&point, H, |t, x| {
            let y = t.slice_cols(x, 1, 2)?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("slice_cols", err);
        let (oc, wc) = (randn(&mut rng, vec![3, 2]), randn(&mut rng, vec![3, 6]));
        let err = grad_check(&point, H, |t, x| {
            let o = t.constant(oc.clone());
            let y = t.concat_cols(&[x, o])?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("concat_cols", err);
        let wc = randn(&mut rng, vec![4]);
        let err = grad_check(&point, H, |t, x| {
            let y = t.mean_rows_masked(x, &[true, false, true])?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("mean_rows_masked", err);
        let wc = randn(&mut rng, vec![4, 3]);
        let err = grad_check(&point, H, |t, x| {
            let y = t.reshape(x, vec![4, 3])?;
            readout(t, y, &wc)
        })
        .unwrap();
        check("reshape", err);
    }
}

#[test]
fn conv_and_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..POINTS {
        let x = randn(&mut rng, vec![2, 6, 6]);
        let w = randn(&mut rng, vec![3, 2, 3, 3]);
        let b = randn(&mut rng, vec![3]);
        let wout = randn(&mut rng, vec![3, 3, 3]);

        let (wc, bc, rc) = (w.clone(), b.clone(), wout.clone());
        let err = grad_check(&x, H, |t, xv| {
            let wv = t.constant(wc.clone());
            let bv = t.constant(bc.clone());
            let y = t.conv2d(xv, wv, bv, 2, 1)?;
            readout(t, y, &rc)
        })
        .unwrap();
        check("conv2d/x", err);

        let (xc, bc, rc) = (x.clone(), b.clone(), wout.clone());
        let err = grad_check(&w, H, |t, wv| {
            let xv = t.constant(xc.clone());
            let bv = t.constant(bc.clone());
            let y = t.conv2d(xv, wv, bv, 2, 1)?;
            readout(t, y, &rc)
        })
        .unwrap();
        check("conv2d/w", err);

        let (xc, wc, rc) = (x.clone(), w.clone(), wout.clone());
        let err = grad_check(&b, H, |t, bv| {
            let xv = t.constant(xc.clone());
            let wv = t.constant(wc.clone());
            let y = t.conv2d(xv, wv, bv, 2, 1)?;
            readout(t, y, &rc)
        })
        .unwrap();
        check("conv2d/b", err);

        let rc = randn(&mut rng, vec![2]);
        let err = grad_check(&x, H, |t, xv| {
            let y = t.global_avg_pool(xv)?;
            readout(t, y, &rc)
        })
        .unwrap();
        check("global_avg_pool", err);

        let rc = randn(&mut rng, vec![36, 2]);
        let err = grad_check(&x, H, |t, xv| {
            let y = t.chw_to_rows(xv)?;
            readout(t, y, &rc)
        })
        .unwrap();
        check("chw_to_rows", err);
    }
}

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 32,
        max_text: 8,
        vocab_size: 24,
        feature_mode: FeatureMode::Multiscale,
        image_size: 32,
        cnn_widths: [4, 4, 8, 8, 8],
    }
}

/// Full composite loss (extractor -> assembly -> encoder -> masked-token
/// head -> cross entropy) differentiated w.r.t. the image input, one
/// attention projection, and the token-embedding table.
#[test]
fn composite_loss_matches_finite_differences() {
    let cfg = toy_cfg();
    let text_ids = [7usize, 4, 9, 11];
    let labels = [IGNORE_INDEX, 8, IGNORE_INDEX, 10];

    let composite = |tape: &mut Tape<f64>,
                     net: &Network,
                     image_point: Option<Var>,
                     wq_point: Option<Var>,
                     token_point: Option<Var>|
     -> Result<Var, mmvqa_core::NumericsError> {
        let mut bound = bind_network(tape, net, false);
        if let Some(v) = wq_point {
            bound.layers[0].wq.w = v;
        }
        if let Some(v) = token_point {
            bound.embed.token = v;
        }
        let chw = match image_point {
            Some(v) => v,
            None => tape.constant(Tensor::full(vec![3, 32, 32], 0.3)),
        };
        let feats = encode_chw(tape, &bound.vision, &net.cfg.cnn(), net.cfg.feature_mode, chw)?;
        let seq = assemble_sequence(
            tape,
            &bound,
            Some(&feats),
            &text_ids,
            Some(&labels),
            &net.cfg,
            &mut Phase::Eval,
        )
        .map_err(model_to_numerics)?;
        let out = encoder_forward(tape, &bound, &seq, &net.cfg, &mut Phase::Eval)
            .map_err(model_to_numerics)?;
        let positions = seq.masked_positions();
        let logits = mlm_logits(tape, &bound, &out, &positions, &seq).map_err(model_to_numerics)?;
        tape.cross_entropy(logits, &seq.masked_labels())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for round in 0..7 {
        let net = Network::init_mlm(cfg.clone(), &mut rng).unwrap();

        // w.r.t. one attention projection
        let point = net.trunk.layers[0].wq.w.cast::<f64>();
        let err = grad_check(&point, H, |t, x| composite(t, &net, None, Some(x), None)).unwrap();
        check("composite/wq", err);

        // w.r.t. the token embedding table
        let point = net.trunk.embed.token.cast::<f64>();
        let err = grad_check(&point, H, |t, x| composite(t, &net, None, None, Some(x))).unwrap();
        check("composite/token_embed", err);

        // w.r.t. the raw image (first round only: 3072 coordinates)
        if round == 0 {
            let img = randn(&mut rng, vec![3, 32, 32]);
            let err = grad_check(&img, H, |t, x| composite(t, &net, Some(x), None, None)).unwrap();
            check("composite/image", err);
        }
    }
}

/// A classification composite: extractor + encoder + answer head.
#[test]
fn vqa_composite_matches_finite_differences() {
    let cfg = toy_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..3 {
        let net = Network::init_vqa(cfg.clone(), 5, &mut rng).unwrap();
        let point = net.trunk.layers[1].ffn_in.w.cast::<f64>();
        let err = grad_check(&point, H, |tape, x| {
            let mut bound = bind_network(tape, &net, false);
            bound.layers[1].ffn_in.w = x;
            let chw = tape.constant(Tensor::full(vec![3, 32, 32], 0.4));
            let feats = encode_chw(tape, &bound.vision, &net.cfg.cnn(), net.cfg.feature_mode, chw)?;
            let seq = assemble_sequence(
                tape,
                &bound,
                Some(&feats),
                &[6, 7],
                None,
                &net.cfg,
                &mut Phase::Eval,
            )
            .map_err(model_to_numerics)?;
            let out = encoder_forward(tape, &bound, &seq, &net.cfg, &mut Phase::Eval)
                .map_err(model_to_numerics)?;
            let logits = vqa_logits(tape, &bound, &out, &seq).map_err(model_to_numerics)?;
            let classes = tape.value(logits).len();
            let row = tape.reshape(logits, vec![1, classes])?;
            tape.cross_entropy(row, &[2])
        })
        .unwrap();
        check("composite/vqa_ffn", err);
    }
}

/// Gradients w.r.t. padded-position embeddings are exactly zero.
#[test]
fn padded_positions_receive_exactly_zero_gradient() {
    let cfg = toy_cfg();
    let net = Network::init_vqa(cfg.clone(), 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut tape = Tape::<f64>::new();
    let bound = bind_network(&mut tape, &net, true);

    let t = cfg.seq_len();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embedded = tape.leaf(randn(&mut rng, vec![t, cfg.dim]), true);
    let mut valid = vec![true; t];
    for slot in valid.iter_mut().skip(t - 5) {
        *slot = false;
    }
    let seq = MultimodalSequence {
        x: embedded,
        valid: valid.clone(),
        segments: vec![0; t],
        positions: vec![0; t],
        n_img: cfg.image_tokens(),
        text_start: cfg.image_tokens() + 2,
        n_text: 2,
        labels: vec![IGNORE_INDEX; t],
    };
    let out = encoder_forward(&mut tape, &bound, &seq, &cfg, &mut Phase::Eval).unwrap();
    let logits = vqa_logits(&mut tape, &bound, &out, &seq).unwrap();
    let row = tape.reshape(logits, vec![1, 4]).unwrap();
    let loss = tape.cross_entropy(row, &[1]).unwrap();
    tape.backward(loss).unwrap();

    let grad = tape.grad(embedded).unwrap();
    for (pos, &ok) in valid.iter().enumerate() {
        for d in 0..cfg.dim {
            let g = grad.at2(pos, d);
            if ok {
                continue;
            }
            assert_eq!(g, 0.0, "padded position {pos} dim {d} leaked gradient {g}");
        }
    }
    // and at least one real position carries gradient
    let any: f64 = (0..cfg.dim).map(|d| grad.at2(0, d).abs()).sum();
    assert!(any > 0.0);
}

fn model_to_numerics(e: mmvqa_core::model::ModelError) -> mmvqa_core::NumericsError {
    match e {
        mmvqa_core::model::ModelError::Numeric { source, .. } => source,
        other => mmvqa_core::NumericsError::BadValue {
            op: "model",
            msg: alloc_format(other),
        },
    }
}

fn alloc_format(e: mmvqa_core::model::ModelError) -> String {
    format!("{e}")
}
