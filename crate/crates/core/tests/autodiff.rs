mod support;

use rand::Rng;
use tcv2_core::rng::stream;
use tcv2_core::tensor::{finite_diff_grad, relative_error, DenseTensor, ParamId, ParamStore, Tape};

use support::random_matrix;

struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn mlp(store: &mut ParamStore, d_in: usize, hidden: usize, classes: usize, seed: u64) -> Mlp {
    let mut rng = stream(seed, &[]);
    let mut reg = |name: &str, dims: &[usize]| {
        let t = random_matrix(&mut rng, 1, dims.iter().product(), 0.8);
        store.register(name, t.reshaped(dims).unwrap()).unwrap()
    };
    Mlp {
        w1: reg("w1", &[hidden, d_in]),
        b1: reg("b1", &[hidden]),
        w2: reg("w2", &[classes, hidden]),
        b2: reg("b2", &[classes]),
    }
}

fn tape_loss(store: &ParamStore, m: &Mlp, x: &DenseTensor, y: &[usize]) -> (Tape, tcv2_core::tensor::Var) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w1 = tape.param(store, m.w1);
    let w1t = tape.transpose(w1).unwrap();
    let b1 = tape.param(store, m.b1);
    let h = tape.matmul(xv, w1t).unwrap();
    let h = tape.add(h, b1).unwrap();
    let h = tape.tanh(h).unwrap();
    let w2 = tape.param(store, m.w2);
    let w2t = tape.transpose(w2).unwrap();
    let b2 = tape.param(store, m.b2);
    let o = tape.matmul(h, w2t).unwrap();
    let o = tape.add(o, b2).unwrap();
    let loss = tape.cross_entropy_logits(o, y).unwrap();
    (tape, loss)
}

/// Mean cross-entropy of the MLP, by scalar loops.
fn scalar_loss(store: &ParamStore, m: &Mlp, x: &DenseTensor, y: &[usize]) -> f64 {
    let (w1, b1, w2, b2) = (store.value(m.w1), store.value(m.b1), store.value(m.w2), store.value(m.b2));
    let (hidden, d_in) = (w1.dims()[0], w1.dims()[1]);
    let classes = w2.dims()[0];
    let mut total = 0.0;
    for (r, &target) in y.iter().enumerate() {
        let h: Vec<f64> = (0..hidden)
            .map(|i| (b1.values()[i] + (0..d_in).map(|j| w1.values()[i * d_in + j] * x.at(r, j)).sum::<f64>()).tanh())
            .collect();
        let o: Vec<f64> = (0..classes)
            .map(|c| b2.values()[c] + (0..hidden).map(|i| w2.values()[c * hidden + i] * h[i]).sum::<f64>())
            .collect();
        let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + o.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - o[target];
    }
    total / y.len() as f64
}

#[test]
fn two_layer_mlp_gradients_match_scalar_finite_differences() {
    let mut rng = stream(21, &[]);
    for case in 0..10 {
        let (d_in, hidden, classes, n) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(2..5), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let m = mlp(&mut store, d_in, hidden, classes, case);
        let x = random_matrix(&mut rng, n, d_in, 2.0);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let (tape, loss) = tape_loss(&store, &m, &x, &y);
        assert!((tape.value(loss).item() - scalar_loss(&store, &m, &x, &y)).abs() < 1e-12);
        tape.backward(loss, &mut store).unwrap();
        for id in [m.w1, m.b1, m.w2, m.b2] {
            let analytic = store.get(id).grad().clone();
            for i in 0..analytic.numel() {
                let orig = store.value(id).values()[i];
                let h = 1e-5;
                store.get_mut(id).value_mut().values_mut()[i] = orig + h;
                let plus = scalar_loss(&store, &m, &x, &y);
                store.get_mut(id).value_mut().values_mut()[i] = orig - h;
                let minus = scalar_loss(&store, &m, &x, &y);
                store.get_mut(id).value_mut().values_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(analytic.values()[i], numeric);
                assert!(err < 1e-5, "case {case} {} [{i}]: {} vs {numeric}", store.get(id).stable_id(), analytic.values()[i]);
            }
        }
    }
}

#[test]
fn finite_diff_grad_agrees_with_backward() {
    let mut rng = stream(22, &[]);
    let mut store = ParamStore::new();
    let m = mlp(&mut store, 4, 5, 3, 7);
    let x = random_matrix(&mut rng, 6, 4, 1.0);
    let y = [0, 1, 2, 2, 1, 0];
    let (tape, loss) = tape_loss(&store, &m, &x, &y);
    tape.backward(loss, &mut store).unwrap();
    for id in [m.w1, m.b1, m.w2, m.b2] {
        let analytic = store.get(id).grad().clone();
        let before = store.value(id).clone();
        let numeric = finite_diff_grad(&mut store, id, 1e-5, |s| {
            let (t, l) = tape_loss(s, &m, &x, &y);
            Ok(t.value(l).item())
        })
        .unwrap();
        assert!(store.value(id).bit_eq(&before));
        for (a, b) in analytic.values().iter().zip(numeric.values()) {
            assert!(relative_error(*a, *b) < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn gradients_accumulate_across_tapes() {
    let mut rng = stream(23, &[]);
    let mut store = ParamStore::new();
    let m = mlp(&mut store, 3, 4, 2, 9);
    let x = random_matrix(&mut rng, 2, 3, 1.0);
    let (t, l) = tape_loss(&store, &m, &x, &[0, 1]);
    t.backward(l, &mut store).unwrap();
    let once: Vec<DenseTensor> = store.iter().map(|p| p.grad().clone()).collect();
    let (t, l) = tape_loss(&store, &m, &x, &[0, 1]);
    t.backward(l, &mut store).unwrap();
    for (p, g) in store.iter().zip(&once) {
        for (a, b) in p.grad().values().iter().zip(g.values()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}
