//! Finite-difference validation of the tape's backward pass, op by op and
//! through a composite network that exercises every op at once.

use gsa::numerics::{
    finite_diff_grad, max_rel_error, Activation, Conv2dLayer, ConvMeta, GaussianVars, GruCell,
    Linear, ParamSet, Tape, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor<f64> {
    gsa::numerics::standard_normal(rng, &[rows, cols]).map(|x| x * 0.5)
}

/// Analytic gradients via the tape for an arbitrary scalar-valued builder.
fn analytic(
    params: &ParamSet<f64>,
    build: impl Fn(&mut Tape<f64>, &gsa::numerics::Bound) -> gsa::numerics::Var,
) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = build(&mut tape, &bound);
    let grads = tape.backward(loss);
    (0..params.len())
        .map(|i| {
            let id = gsa::numerics::ParamId(i);
            grads.get(bound.var(id), params.get(id).value.shape())
        })
        .collect()
}

fn check(
    params: &ParamSet<f64>,
    build: impl Fn(&mut Tape<f64>, &gsa::numerics::Bound) -> gsa::numerics::Var,
    tol: f64,
) {
    let a = analytic(params, &build);
    let mut f = |ps: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let loss = build(&mut tape, &bound);
        tape.value(loss).item()
    };
    let n = finite_diff_grad(&mut f, params, 1e-5).unwrap();
    let err = max_rel_error(&a, &n);
    assert!(err < tol, "max relative error {err} exceeds {tol}");
}

#[test]
fn dense_stack_with_all_activations() {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut ps = ParamSet::new();
    let l1 = Linear::new(&mut ps, &mut rng, "l1", 4, 6, Activation::Silu);
    let l2 = Linear::new(&mut ps, &mut rng, "l2", 6, 5, Activation::Tanh);
    let l3 = Linear::new(&mut ps, &mut rng, "l3", 5, 3, Activation::Sigmoid);
    let x = random_tensor(&mut rng, 3, 4);

    check(
        &ps,
        move |tape, bound| {
            let xv = tape.constant(x.clone());
            let h1 = l1.forward(tape, bound, xv);
            let h2 = l2.forward(tape, bound, h1);
            let h3 = l3.forward(tape, bound, h2);
            let e = tape.exp(h3);
            let sp = tape.softplus(e);
            let rs = tape.row_sum(sp);
            tape.mean_all(rs)
        },
        1e-6,
    );
}

#[test]
fn gru_cell_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let mut ps = ParamSet::new();
    let cell = GruCell::new(&mut ps, &mut rng, "gru", 3, 5);
    let x = random_tensor(&mut rng, 2, 3);
    let h0 = random_tensor(&mut rng, 2, 5);

    check(
        &ps,
        move |tape, bound| {
            let xv = tape.constant(x.clone());
            let hv = tape.constant(h0.clone());
            let h1 = cell.step(tape, bound, xv, hv);
            let h2 = cell.step(tape, bound, xv, h1);
            let sq = tape.square(h2);
            tape.mean_all(sq)
        },
        1e-6,
    );
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(303);
    let mut ps = ParamSet::new();
    let meta1 = ConvMeta {
        in_h: 8,
        in_w: 8,
        in_c: 1,
        out_c: 2,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let meta2 = ConvMeta {
        in_h: 4,
        in_w: 4,
        in_c: 2,
        out_c: 3,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let c1 = Conv2dLayer::new(&mut ps, &mut rng, "c1", meta1, Activation::Silu);
    let c2 = Conv2dLayer::new(&mut ps, &mut rng, "c2", meta2, Activation::Silu);
    let head = Linear::new(&mut ps, &mut rng, "head", 3 * 2 * 2, 2, Activation::None);
    let img = random_tensor(&mut rng, 2, 64);

    check(
        &ps,
        move |tape, bound| {
            let x = tape.constant(img.clone());
            let h1 = c1.forward(tape, bound, x);
            let h2 = c2.forward(tape, bound, h1);
            let y = head.forward(tape, bound, h2);
            let sq = tape.square(y);
            tape.mean_all(sq)
        },
        1e-6,
    );
}

#[test]
fn conv_gradient_flows_into_input() {
    // Encoders are also differentiated w.r.t. their image inputs in some
    // checks; make sure d loss / d input is right too.
    let mut rng = ChaCha12Rng::seed_from_u64(304);
    let meta = ConvMeta {
        in_h: 6,
        in_w: 6,
        in_c: 1,
        out_c: 2,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let mut ps = ParamSet::new();
    let img_id = ps.add("img", random_tensor(&mut rng, 2, 36));
    let conv = Conv2dLayer::new(&mut ps, &mut rng, "c", meta, Activation::Tanh);
    let _ = img_id;

    check(
        &ps,
        move |tape, bound| {
            let x = bound.var(gsa::numerics::ParamId(0));
            let y = conv.forward(tape, bound, x);
            let sq = tape.square(y);
            tape.mean_all(sq)
        },
        1e-6,
    );
}

#[test]
fn gaussian_head_kl_logprob_entropy_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let mut ps = ParamSet::new();
    let head_q = Linear::new(&mut ps, &mut rng, "q", 4, 6, Activation::None);
    let head_p = Linear::new(&mut ps, &mut rng, "p", 4, 6, Activation::None);
    let x = random_tensor(&mut rng, 3, 4);
    let noise = random_tensor(&mut rng, 3, 3);
    let target = random_tensor(&mut rng, 3, 3);

    check(
        &ps,
        move |tape, bound| {
            let xv = tape.constant(x.clone());
            let q_out = head_q.forward(tape, bound, xv);
            let p_out = head_p.forward(tape, bound, xv);
            let q = GaussianVars::from_head(tape, q_out, 3);
            let p = GaussianVars::from_head(tape, p_out, 3);

            let kl = q.kl(tape, &p);
            let sample = q.sample_with(tape, &noise);
            let squashed = tape.tanh(sample);
            let corr = gsa::numerics::gaussian::tanh_log_det(tape, sample);
            let lp_t = tape.constant(target.clone());
            let lp = p.log_prob(tape, lp_t);
            let ent = q.entropy(tape);

            let a = tape.row_sum(squashed);
            let b = tape.add(kl, lp);
            let c = tape.add(b, ent);
            let d = tape.add(c, corr);
            let e = tape.add(d, a);
            tape.mean_all(e)
        },
        1e-6,
    );
}

#[test]
fn sequence_with_row_ops_and_broadcast() {
    // Exercises concat_rows, slice_rows, broadcast_rows, clamp_min together.
    let mut rng = ChaCha12Rng::seed_from_u64(505);
    let mut ps = ParamSet::new();
    let init = ps.add("init", random_tensor(&mut rng, 1, 4));
    let lin = Linear::new(&mut ps, &mut rng, "lin", 4, 4, Activation::Silu);
    let x1 = random_tensor(&mut rng, 3, 4);
    let x2 = random_tensor(&mut rng, 3, 4);

    check(
        &ps,
        move |tape, bound| {
            let a = tape.constant(x1.clone());
            let b = tape.constant(x2.clone());
            let stacked = tape.concat_rows(&[a, b]);
            let first_half = tape.slice_rows(stacked, 0, 3);
            let init_b = tape.broadcast_rows(bound.var(init), 3);
            let mixed = tape.add(first_half, init_b);
            let h = lin.forward(tape, bound, mixed);
            let floored = tape.clamp_min(h, 0.05);
            let rs = tape.row_sum(floored);
            tape.mean_all(rs)
        },
        2e-5,
    );
}
