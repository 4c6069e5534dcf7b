use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check, ParamStore, Tape, Tensor};
use crate::path::{GradMode, SolverConfig};

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn small(series: usize, use_agc: bool) -> L1Config {
    L1Config {
        series,
        hidden: 3,
        gamma_hidden: 4,
        gamma_depth: 2,
        embed_dim: 2,
        use_agc,
    }
}

fn build(cfg: L1Config, dx: usize, seed: u64) -> (L1, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l1 = L1::new(cfg, dx, &mut store, &mut rng).unwrap();
    // nonzero biases so every path through the field is exercised
    for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
        if name.ends_with(".b0") || name.ends_with(".b1") || name.ends_with(".b") {
            *t = rand_t(t.shape(), &mut rng).scale(0.3);
        }
    }
    (l1, store)
}

fn encode(l1: &L1, store: &ParamStore, series: &[Tensor], solver: &SolverConfig) -> Tensor {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    l1.encode(&tape, &bound, series, solver).unwrap().to_tensor()
}

#[test]
fn agc_identity_embeddings_by_hand() {
    let tape = Tape::new();
    let i2 = || tape.constant(Tensor::eye(2));
    let out = agc(i2(), i2(), i2(), tape.constant(Tensor::zeros(&[2])))
        .unwrap()
        .to_tensor();
    let e = std::f64::consts::E;
    let (d, o) = (e / (e + 1.0), 1.0 / (e + 1.0));
    let want = [1.0 + d, o, o, 1.0 + d];
    for (a, b) in out.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_embeddings_give_uniform_rows() {
    let tape = Tape::new();
    let a = agc_adjacency(tape.constant(Tensor::zeros(&[5, 3]))).to_tensor();
    assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let one = agc_adjacency(tape.constant(Tensor::new(&[1, 2], vec![0.4, -3.0]))).to_tensor();
    assert_eq!(one.data(), &[1.0]);
}

#[test]
fn adjacency_rows_are_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let tape = Tape::new();
        let a = agc_adjacency(tape.constant(rand_t(&[6, 4], &mut rng).scale(3.0))).to_tensor();
        for i in 0..6 {
            assert!(a.row(i).iter().all(|&v| v >= 0.0));
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn agc_rejects_mismatched_rows() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let e = tape.constant(Tensor::zeros(&[2, 2]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(agc(z, e, w, tape.constant(Tensor::zeros(&[2]))).is_err());
}

#[test]
fn zero_gamma_embeds_to_zero() {
    let (l1, mut store) = build(small(2, true), 2, 2);
    for (n, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
        if n.contains("gamma") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]));
    let h = l1.embed_initial(&bound, x).unwrap().to_tensor();
    assert_eq!(h.shape(), &[2, 3]);
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn series_have_their_own_embeddings() {
    let (l1, store) = build(small(2, true), 2, 3);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]));
    let h = l1.embed_initial(&bound, x).unwrap().to_tensor();
    assert_ne!(h.row(0), h.row(1));
}

#[test]
fn field_shape_and_cross_series_coupling() {
    let (l1, store) = build(small(3, true), 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = rand_t(&[3, 3], &mut rng);
    let eval = |h: &Tensor| {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let p = l1.field_params(&bound);
        l1.field()
            .eval(&tape, tape.constant(h.clone()), &p)
            .unwrap()
            .to_tensor()
    };
    let base = eval(&h);
    assert_eq!(base.shape(), &[3, 3, 2]);
    let mut moved = h.clone();
    moved.data_mut()[3] += 0.5; // series 1
    let after = eval(&moved);
    let row0 = |t: &Tensor| t.data()[..6].to_vec();
    assert_ne!(row0(&base), row0(&after));
}

#[test]
fn without_agc_series_are_decoupled() {
    let (l1, store) = build(small(3, false), 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = rand_t(&[3, 3], &mut rng);
    let eval = |h: &Tensor| {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let p = l1.field_params(&bound);
        l1.field()
            .eval(&tape, tape.constant(h.clone()), &p)
            .unwrap()
            .to_tensor()
    };
    let base = eval(&h);
    let mut moved = h.clone();
    moved.data_mut()[3] += 0.5;
    assert_eq!(base.data()[..6], eval(&moved).data()[..6]);
}

fn zero_out_layer(store: &mut ParamStore) {
    for (n, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
        if n.starts_with("l1.field.out") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

#[test]
fn zero_field_returns_initial_embedding() {
    let (l1, mut store) = build(small(2, true), 2, 6);
    zero_out_layer(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let series = vec![rand_t(&[6, 2], &mut rng), rand_t(&[6, 2], &mut rng)];
    let h = encode(&l1, &store, &series, &SolverConfig::default());
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let x1 = Tensor::from_rows(&[series[0].row(0).to_vec(), series[1].row(0).to_vec()]);
    let want = l1.embed_initial(&bound, tape.constant(x1)).unwrap().to_tensor();
    assert_eq!(h, want);
}

#[test]
fn constant_field_matches_closed_form() {
    // field ≡ tanh(b_o), so h(T) = h(1) + tanh(b_o) (X(T) - X(1)) exactly
    let (l1, mut store) = build(small(1, true), 1, 8);
    let id = store.find("l1.field.out.w").unwrap();
    *store.get_mut(id) = Tensor::zeros(&[3, 3]);
    let b = store.get(store.find("l1.field.out.b").unwrap()).clone();
    let series = vec![Tensor::new(&[8, 1], (1..=8).map(|k| k as f64 * 0.5).collect())];
    let h = encode(&l1, &store, &series, &SolverConfig::default());
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let h0 = l1
        .embed_initial(&bound, tape.constant(Tensor::new(&[1, 1], vec![0.5])))
        .unwrap()
        .to_tensor();
    for j in 0..3 {
        let want = h0.data()[j] + b.data()[j].tanh() * 3.5;
        assert!((h.data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn permuting_series_permutes_outputs() {
    let (l1, store) = build(small(3, true), 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let series: Vec<Tensor> = (0..3).map(|_| rand_t(&[5, 2], &mut rng)).collect();
    let perm = [2usize, 0, 1];
    let mut permuted = ParamStore::new();
    for (n, t) in store.names().iter().zip(store.tensors()) {
        let mut v = t.clone();
        if let Some(rest) = n.strip_prefix("l1.gamma") {
            let i: usize = rest[..1].parse().unwrap();
            let src = format!("l1.gamma{}{}", perm[i], &rest[1..]);
            v = store.get(store.find(&src).unwrap()).clone();
        } else if n == "l1.field.embed" {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
            v = Tensor::from_rows(&rows);
        }
        permuted.add(n.clone(), v);
    }
    let ps: Vec<Tensor> = perm.iter().map(|&p| series[p].clone()).collect();
    let cfg = SolverConfig::default();
    let a = encode(&l1, &store, &series, &cfg);
    let b = encode(&l1, &permuted, &ps, &cfg);
    for (i, &p) in perm.iter().enumerate() {
        for (u, v) in b.row(i).iter().zip(a.row(p)) {
            assert!((u - v).abs() < 1e-13);
        }
    }
}

#[test]
fn encode_rejects_bad_inputs() {
    let (l1, store) = build(small(2, true), 2, 11);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let cfg = SolverConfig::default();
    let uneven = vec![Tensor::zeros(&[5, 2]), Tensor::zeros(&[4, 2])];
    assert!(l1.encode(&tape, &bound, &uneven, &cfg).is_err());
    let short = vec![Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])];
    assert!(l1.encode(&tape, &bound, &short, &cfg).is_err());
    assert!(l1.encode(&tape, &bound, &uneven[..1], &cfg).is_err());
}

fn encode_fd(mode: GradMode) -> f64 {
    let (l1, store) = build(small(2, true), 2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let series = vec![rand_t(&[5, 2], &mut rng), rand_t(&[5, 2], &mut rng)];
    let target = rand_t(&[2, 3], &mut rng);
    let solver = SolverConfig {
        // the adjoint solves the continuous problem, so it needs a fine grid
        // to agree with differences of the discrete forward pass
        steps_per_interval: if mode == GradMode::Adjoint { 48 } else { 2 },
        mode,
    };
    let r = finite_diff_check(
        |tape, vars| {
            let bound = crate::autodiff::Bound::from_vars(vars.to_vec());
            let h = l1.encode(tape, &bound, &series, &solver)?;
            Ok(h.mse(tape.constant(target.clone())))
        },
        store.tensors(),
        1e-5,
    )
    .unwrap();
    r.max_rel_err
}

#[test]
fn encode_gradients_match_finite_differences() {
    let e = encode_fd(GradMode::Backprop);
    assert!(e < 1e-4, "{e}");
    let e = encode_fd(GradMode::Adjoint);
    assert!(e < 1e-4, "{e}");
}
