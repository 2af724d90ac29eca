//! Finite-difference verification of the reverse-mode gradients: every tape
//! primitive is probed with a random cotangent against central differences,
//! and the full training loss is checked end to end through the denoiser on
//! a sampled subset of its parameters.

use tsdiff_core::autodiff::{Tape, Var};
use tsdiff_core::data::{gen_sines, SineOptions};
use tsdiff_core::denoiser::{DenoiserConfig, DenoiserModel};
use tsdiff_core::gradcheck::{grad_check, grad_check_sampled};
use tsdiff_core::rng;
use tsdiff_core::schedule::cosine_schedule;
use tsdiff_core::tensor::Tensor;
use tsdiff_core::training::{example_loss_and_grads, LossWeights, TrainExample};

const PRIMITIVE_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

fn rand_tensor(shape: &[usize], tag: u64) -> Tensor {
    let mut r = rng::substream(90, "gradcheck-input", tag);
    rng::uniform_tensor(&mut r, shape, -1.0, 1.0)
}

/// Checks d loss / d inputs[which] where loss = <probe, build(inputs)> and
/// the probe is a fixed random cotangent shaped like the output.
fn check_op(
    label: &str,
    inputs: &[Tensor],
    which: usize,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) {
    // Shape discovery pass to size the probe.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let mut pr = rng::substream(91, "gradcheck-probe", which as u64);
    let probe = rng::normal_tensor(&mut pr, tape.value(out).shape());

    let run = |x: &Tensor| -> (Tape, Var, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if j == which {
                    tape.input(x.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let y = build(&mut tape, &vars);
        let p = tape.constant(probe.clone());
        let weighted = tape.mul(y, p).unwrap();
        let loss = tape.sum_all(weighted).unwrap();
        (tape, vars[which], loss)
    };

    let x0 = &inputs[which];
    let (mut tape, xv, loss) = run(x0);
    tape.backward(loss).unwrap();
    let analytic = tape.grad_tensor(xv);

    let shape = x0.shape().to_vec();
    let mut f = |v: &[f64]| {
        let x = Tensor::from_vec(&shape, v.to_vec()).unwrap();
        let (tape, _, loss) = run(&x);
        tape.scalar(loss)
    };
    let err = grad_check(&mut f, x0.data(), analytic.data(), FD_EPS);
    assert!(err < PRIMITIVE_TOL, "{label} (input {which}): max rel err {err}");
}

#[test]
fn linear_and_elementwise_ops() {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[4, 2], 2);
    for which in 0..2 {
        check_op("matmul", &[a.clone(), b.clone()], which, &|t, v| {
            t.matmul(v[0], v[1]).unwrap()
        });
    }
    check_op("transpose", &[a.clone()], 0, &|t, v| t.transpose(v[0]).unwrap());

    let c = rand_tensor(&[4, 3], 3);
    let d = rand_tensor(&[4, 3], 4);
    for which in 0..2 {
        check_op("add", &[c.clone(), d.clone()], which, &|t, v| t.add(v[0], v[1]).unwrap());
        check_op("sub", &[c.clone(), d.clone()], which, &|t, v| t.sub(v[0], v[1]).unwrap());
        check_op("mul", &[c.clone(), d.clone()], which, &|t, v| t.mul(v[0], v[1]).unwrap());
    }
    check_op("scale", &[c.clone()], 0, &|t, v| t.scale(v[0], -1.7).unwrap());
}

#[test]
fn row_broadcast_and_reshape_ops() {
    let x = rand_tensor(&[4, 3], 5);
    let row = rand_tensor(&[1, 3], 6);
    for which in 0..2 {
        check_op("add_row", &[x.clone(), row.clone()], which, &|t, v| {
            t.add_row(v[0], v[1]).unwrap()
        });
        check_op("mul_row", &[x.clone(), row.clone()], which, &|t, v| {
            t.mul_row(v[0], v[1]).unwrap()
        });
    }
    let row5 = rand_tensor(&[1, 5], 7);
    check_op("broadcast_row", &[row5], 0, &|t, v| t.broadcast_row(v[0], 4).unwrap());

    let wide = rand_tensor(&[4, 6], 8);
    check_op("slice_cols", &[wide], 0, &|t, v| t.slice_cols(v[0], 1, 3).unwrap());

    let p0 = rand_tensor(&[4, 2], 9);
    let p1 = rand_tensor(&[4, 3], 10);
    for which in 0..2 {
        check_op("concat_cols", &[p0.clone(), p1.clone()], which, &|t, v| {
            t.concat_cols(&[v[0], v[1]]).unwrap()
        });
    }
    let tall = rand_tensor(&[5, 3], 11);
    check_op("mean_rows", &[tall], 0, &|t, v| t.mean_rows(v[0]).unwrap());
}

#[test]
fn reductions_and_nonlinearities() {
    let x = rand_tensor(&[4, 3], 12);
    check_op("sum_all", &[x.clone()], 0, &|t, v| t.sum_all(v[0]).unwrap());
    check_op("sum_squares", &[x.clone()], 0, &|t, v| t.sum_squares(v[0]).unwrap());

    // |x| is kinked at 0, so keep every coordinate well away from it.
    let signed = Tensor::from_fn_2d(4, 3, |r, c| {
        let mag = 0.3 + 0.1 * (1 + r * 3 + c) as f64;
        if (r + c) % 2 == 0 {
            mag
        } else {
            -mag
        }
    });
    check_op("sum_abs", &[signed], 0, &|t, v| t.sum_abs(v[0]).unwrap());

    let logits = rand_tensor(&[3, 5], 13);
    check_op("softmax_rows", &[logits], 0, &|t, v| t.softmax_rows(v[0]).unwrap());

    check_op("sigmoid", &[x.clone()], 0, &|t, v| t.sigmoid(v[0]).unwrap());
    check_op("tanh", &[x.clone()], 0, &|t, v| t.tanh(v[0]).unwrap());
    check_op("gelu", &[x.clone()], 0, &|t, v| t.gelu(v[0]).unwrap());

    let bin_targets = Tensor::from_fn_2d(6, 1, |r, _| (r % 2) as f64);
    let head = rand_tensor(&[6, 1], 14);
    check_op("logistic_loss", &[head], 0, &|t, v| {
        t.logistic_loss(v[0], &bin_targets).unwrap()
    });
}

#[test]
fn normalization_and_attention() {
    let x = rand_tensor(&[4, 6], 15);
    let gain = rand_tensor(&[1, 6], 16);
    let bias = rand_tensor(&[1, 6], 17);
    for which in 0..3 {
        check_op(
            "layer_norm",
            &[x.clone(), gain.clone(), bias.clone()],
            which,
            &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
    }

    let q = rand_tensor(&[4, 8], 18);
    let k = rand_tensor(&[5, 8], 19);
    let v = rand_tensor(&[5, 8], 20);
    for which in 0..3 {
        check_op(
            "softmax_attention",
            &[q.clone(), k.clone(), v.clone()],
            which,
            &|t, vars| t.softmax_attention(vars[0], vars[1], vars[2], 8f64.sqrt().recip()).unwrap(),
        );
    }
}

#[test]
fn fourier_transform_pair() {
    let x = rand_tensor(&[8, 2], 21);
    let mut pr = rng::substream(91, "gradcheck-probe", 40);
    // Discover spectrum shape once.
    let (re_shape, im_shape) = {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (re, im) = tape.rdft(xv).unwrap();
        (tape.value(re).shape().to_vec(), tape.value(im).shape().to_vec())
    };
    let probe_re = rng::normal_tensor(&mut pr, &re_shape);
    let probe_im = rng::normal_tensor(&mut pr, &im_shape);

    // rdft: loss = <probe_re, re> + <probe_im, im>.
    let run_rdft = |x: &Tensor| -> (Tape, Var, Var) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (re, im) = tape.rdft(xv).unwrap();
        let pr_ = tape.constant(probe_re.clone());
        let pi_ = tape.constant(probe_im.clone());
        let wr = tape.mul(re, pr_).unwrap();
        let wi = tape.mul(im, pi_).unwrap();
        let sr = tape.sum_all(wr).unwrap();
        let si = tape.sum_all(wi).unwrap();
        let loss = tape.add(sr, si).unwrap();
        (tape, xv, loss)
    };
    let (mut tape, xv, loss) = run_rdft(&x);
    tape.backward(loss).unwrap();
    let analytic = tape.grad_tensor(xv);
    let mut f = |v: &[f64]| {
        let xt = Tensor::from_vec(&[8, 2], v.to_vec()).unwrap();
        let (tape, _, loss) = run_rdft(&xt);
        tape.scalar(loss)
    };
    let err = grad_check(&mut f, x.data(), analytic.data(), FD_EPS);
    assert!(err < PRIMITIVE_TOL, "rdft: max rel err {err}");

    // irdft back to 8 steps, checked against both spectrum halves.
    let re0 = rand_tensor(&re_shape, 22);
    let im0 = rand_tensor(&im_shape, 23);
    for which in 0..2 {
        check_op("irdft", &[re0.clone(), im0.clone()], which, &|t, v| {
            t.irdft(v[0], v[1], 8).unwrap()
        });
    }
}

#[test]
fn diffusion_loss_end_to_end() {
    let config = DenoiserConfig {
        tau: 16,
        dim: 2,
        hidden: 32,
        n_heads: 4,
        head_dim: 8,
        enc_layers: 1,
        dec_layers: 2,
        trend_degree: 3,
        top_k: 3,
        timesteps: 10,
    };
    let mut model = DenoiserModel::new(config.clone(), 17).unwrap();
    let schedule = cosine_schedule(10, 0.008).unwrap();
    let weights = LossWeights::default();

    let x0 = gen_sines(1, 16, 2, 33, &SineOptions::default()).unwrap().remove(0);
    let mut er = rng::substream(33, "gradcheck-eps", 0);
    let eps = rng::normal_tensor(&mut er, &[16, 2]);
    let ex = TrainExample { x0, t: 7, eps };

    let (_, grads) = example_loss_and_grads(&model, &schedule, &ex, &weights).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let flat: Vec<f64> = (0..model.params().len())
        .flat_map(|i| model.params().tensor(i).data().to_vec())
        .collect();

    // Probe a handful of coordinates in every parameter tensor instead of
    // all of them; full central differences would need 2 * |theta| forward
    // passes.
    let mut indices = Vec::new();
    let mut offset = 0;
    for i in 0..model.params().len() {
        let n = model.params().tensor(i).data().len();
        indices.push(offset);
        indices.push(offset + n / 2);
        indices.push(offset + n - 1);
        if n > 7 {
            indices.push(offset + n / 3);
        }
        offset += n;
    }
    indices.sort_unstable();
    indices.dedup();

    let shapes: Vec<Vec<usize>> =
        (0..model.params().len()).map(|i| model.params().tensor(i).shape().to_vec()).collect();
    let mut f = |v: &[f64]| {
        let mut pos = 0;
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let t = Tensor::from_vec(shape, v[pos..pos + n].to_vec()).unwrap();
            model.params_mut().set_tensor(i, t);
            pos += n;
        }
        let (loss, _) = example_loss_and_grads(&model, &schedule, &ex, &weights).unwrap();
        loss
    };
    let start = std::time::Instant::now();
    let err = grad_check_sampled(&mut f, &flat, &analytic, 1e-4, &indices);
    assert!(err < 1e-3, "end-to-end loss gradient: max rel err {err}");
    assert!(
        start.elapsed().as_secs() < 60,
        "sampled end-to-end check should finish quickly, took {:?}",
        start.elapsed()
    );
}
