use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Compares tape gradients of `Σ w ⊙ f(inputs)` with central differences,
/// where `w` is a fixed random weighting of the output.
fn check_op<F>(inputs: Vec<Tensor>, tol: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ins: &[Tensor], w: Option<&Tensor>| -> (f64, Vec<Vec<f64>>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        let shape = tape.shape(y).to_vec();
        let wt = match w {
            Some(w) => w.clone(),
            None => Tensor::full(&shape, 1.0),
        };
        let wv = tape.constant(wt.clone());
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(ins)
            .map(|(v, t)| grads.wrt(*v).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.len()]))
            .collect();
        (value, gs, wt)
    };
    let (_, _, shape_probe) = eval(&inputs, None);
    let w = rand_tensor(shape_probe.shape(), &mut rng, -1.0, 1.0);
    let (_, grads, _) = eval(&inputs, Some(&w));
    let eps = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut up = inputs.clone();
            up[i].values_mut()[j] += eps;
            let mut dn = inputs.clone();
            dn[i].values_mut()[j] -= eps;
            let num = (eval(&up, Some(&w)).0 - eval(&dn, Some(&w)).0) / (2.0 * eps);
            let ana = grads[i][j];
            assert!(
                (num - ana).abs() <= tol * (1.0 + num.abs()),
                "input {i} entry {j}: analytic {ana} numeric {num}"
            );
        }
    }
}

fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (p, t) in entries {
        s.insert(*p, t.clone()).unwrap();
    }
    s
}

#[test]
fn linear_identity_and_scalar() {
    let store = store_with(&[
        ("l.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
        ("l.b", Tensor::vector(vec![0.0, 0.0])),
        ("s.w", Tensor::matrix(1, 1, vec![3.0]).unwrap()),
        ("s.b", Tensor::vector(vec![0.0])),
    ]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
    let y = nn::linear(&mut tape, &store, "l", x).unwrap();
    assert_eq!(tape.values(y), &[0.3, -0.7]);
    let x = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let y = nn::linear(&mut tape, &store, "s", x).unwrap();
    assert_eq!(tape.values(y), &[6.0]);
}

#[test]
fn softmax_fixtures() {
    let t = Tensor::matrix(2, 3, vec![5.0, 5.0, 5.0, 0.0, 1.0, 2.0]).unwrap();
    let p = softmax_rows(&t).unwrap();
    for v in &p[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let t = Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
    let p = softmax_rows(&t).unwrap();
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    // shift invariance, including large magnitudes
    let a = Tensor::matrix(1, 3, vec![1.0, 2.0, -1.0]).unwrap();
    let b = Tensor::matrix(1, 3, vec![1001.0, 1002.0, 999.0]).unwrap();
    let (pa, pb) = (softmax_rows(&a).unwrap(), softmax_rows(&b).unwrap());
    for (x, y) in pa.iter().zip(&pb) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_fixtures() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let x = tape.constant(Tensor::matrix(2, 2, vec![4.0, 4.0, 1.0, -1.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.values(y);
    assert!(v[0].abs() < 1e-9 && v[1].abs() < 1e-9);
    assert!((v[2] - 1.0).abs() < 1e-9 && (v[3] + 1.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = rand_tensor(&[3, 5], &mut rng, -2.0, 2.0);
    let gs = rand_tensor(&[5], &mut rng, 0.5, 1.5);
    let bs = rand_tensor(&[5], &mut rng, -0.5, 0.5);
    let mut tape = Tape::new();
    let (x, g, b) = (tape.constant(xs.clone()), tape.constant(gs.clone()), tape.constant(bs.clone()));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for r in 0..3 {
        let row = xs.row(r);
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for c in 0..5 {
            let want = (row[c] - mean) / (var + 1e-5).sqrt() * gs.values()[c] + bs.values()[c];
            assert!((tape.values(y)[r * 5 + c] - want).abs() < 1e-12);
        }
    }
}

/// Direct per-head scaled dot-product attention.
fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let mut s: Vec<f64> = (0..nk)
                .map(|j| (0..dh).map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter_mut().map(|x| { *x = (*x - m).exp(); *x }).sum();
            for j in 0..nk {
                for c in 0..dh {
                    out[i * d + h * dh + c] += s[j] / z * v.row(j)[h * dh + c];
                }
            }
        }
    }
    out
}

#[test]
fn attention_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // one key: output equals its value row
    let q = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let k = rand_tensor(&[1, 4], &mut rng, -1.0, 1.0);
    let v = rand_tensor(&[1, 4], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let o = tape.attention(qv, kv, vv, 2).unwrap();
    for r in 0..3 {
        for c in 0..4 {
            assert!((tape.values(o)[r * 4 + c] - v.values()[c]).abs() < 1e-14);
        }
    }
    // identical keys: output is the mean of values and does not depend on q
    let q = rand_tensor(&[2, 4], &mut rng, -3.0, 3.0);
    let krow = rand_tensor(&[1, 4], &mut rng, -1.0, 1.0);
    let k = Tensor::matrix(3, 4, krow.values().repeat(3)).unwrap();
    let v = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let o = tape.attention(qv, kv, vv, 2).unwrap();
    for c in 0..4 {
        let mean = (0..3).map(|j| v.row(j)[c]).sum::<f64>() / 3.0;
        assert!((tape.values(o)[c] - mean).abs() < 1e-12);
        assert!((tape.values(o)[4 + c] - mean).abs() < 1e-12);
    }
    // general case against the direct formula, and convex hull
    let q = rand_tensor(&[4, 8], &mut rng, -2.0, 2.0);
    let k = rand_tensor(&[5, 8], &mut rng, -2.0, 2.0);
    let v = rand_tensor(&[5, 8], &mut rng, -2.0, 2.0);
    let want = reference_attention(&q, &k, &v, 4);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let o = tape.attention(qv, kv, vv, 4).unwrap();
    for (a, b) in tape.values(o).iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
    for c in 0..8 {
        let lo = (0..5).map(|j| v.row(j)[c]).fold(f64::INFINITY, f64::min);
        let hi = (0..5).map(|j| v.row(j)[c]).fold(f64::NEG_INFINITY, f64::max);
        for r in 0..4 {
            let x = tape.values(o)[r * 8 + c];
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }
}

#[test]
fn grad_matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
    check_op(vec![a.clone(), b.clone()], 1e-6, |t, v| t.matmul(v[0], v[1]));
    let bt = rand_tensor(&[2, 4], &mut rng, -1.0, 1.0);
    check_op(vec![a.clone(), bt], 1e-6, |t, v| t.matmul_t(v[0], v[1], false, true));
    let at = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    check_op(vec![at, b], 1e-6, |t, v| t.matmul_t(v[0], v[1], true, false));
    // same node on both sides
    check_op(vec![a], 1e-6, |t, v| t.matmul_t(v[0], v[0], false, true));
}

#[test]
fn grad_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[3, 4], &mut rng, -2.0, 2.0);
    let b = rand_tensor(&[3, 4], &mut rng, -2.0, 2.0);
    let r = rand_tensor(&[4], &mut rng, -1.0, 1.0);
    check_op(vec![a.clone(), r], 1e-6, |t, v| t.add_row(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], 1e-6, |t, v| t.add(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], 1e-6, |t, v| t.sub(v[0], v[1]));
    check_op(vec![a.clone(), b], 1e-6, |t, v| t.mul(v[0], v[1]));
    check_op(vec![a.clone()], 1e-6, |t, v| t.mul(v[0], v[0]));
    check_op(vec![a.clone()], 1e-6, |t, v| Ok(t.scale(v[0], -1.7)));
    check_op(vec![a.clone()], 1e-6, |t, v| Ok(t.gelu(v[0])));
    check_op(vec![a.clone()], 1e-6, |t, v| Ok(t.sigmoid(v[0])));
    check_op(vec![a.clone()], 1e-6, |t, v| t.softmax(v[0]));
    check_op(vec![a.clone()], 1e-6, |t, v| Ok(t.normalize_rows(v[0])));
    check_op(vec![a], 1e-6, |t, v| t.reshape(v[0], &[2, 6]));
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[3, 6], &mut rng, -2.0, 2.0);
    let g = rand_tensor(&[6], &mut rng, 0.5, 1.5);
    let b = rand_tensor(&[6], &mut rng, -0.5, 0.5);
    check_op(vec![x, g, b], 1e-6, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn grad_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = rand_tensor(&[3, 8], &mut rng, -1.0, 1.0);
    let k = rand_tensor(&[5, 8], &mut rng, -1.0, 1.0);
    let v = rand_tensor(&[5, 8], &mut rng, -1.0, 1.0);
    check_op(vec![q.clone(), k.clone(), v], 1e-6, |t, x| t.attention(x[0], x[1], x[2], 2));
    // key and value are the same node
    check_op(vec![q, k], 1e-6, |t, x| t.attention(x[0], x[1], x[1], 4));
}

#[test]
fn grad_structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = rand_tensor(&[5 * 4, 2], &mut rng, -1.0, 1.0);
    check_op(vec![img.clone()], 1e-6, |t, v| t.im2col(v[0], 5, 4, 1));
    check_op(vec![img], 1e-6, |t, v| t.im2col(v[0], 5, 4, 2));
    let a = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    let c = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
    check_op(vec![a.clone()], 1e-6, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
    check_op(vec![a.clone(), b], 1e-6, |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
    check_op(vec![a.clone(), c], 1e-6, |t, v| t.concat_cols(&[v[0], v[1]]));
    check_op(vec![a.clone()], 1e-6, |t, v| t.segment_max(v[0], &[0..2, 2..3]));
    check_op(vec![a], 1e-6, |t, v| t.segment_mean(v[0], &[0..2, 1..3]));
}

#[test]
fn grad_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = rand_tensor(&[4, 3], &mut rng, -2.0, 2.0);
    check_op(vec![logits], 1e-6, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2], &[1.0, 0.1, 1.0, 0.5]));
    let pred = rand_tensor(&[3, 4], &mut rng, 0.0, 1.0);
    let target: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tg = target.clone();
    check_op(vec![pred], 1e-6, move |t, v| t.l1_loss(v[0], &tg));
    let boxes = Tensor::matrix(2, 4, vec![0.41, 0.52, 0.3, 0.2, 0.2, 0.2, 0.1, 0.12]).unwrap();
    let tboxes = vec![0.5, 0.45, 0.2, 0.3, 0.7, 0.7, 0.2, 0.2];
    check_op(vec![boxes], 1e-6, move |t, v| t.giou_loss(v[0], &tboxes));
}

#[test]
fn cross_entropy_value() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
    let ce = tape.cross_entropy(l, &[1], &[1.0]).unwrap();
    assert!((tape.scalar(ce) + 0.75f64.ln()).abs() < 1e-14);
    assert!(tape.cross_entropy(l, &[2], &[1.0]).is_err());
}

#[test]
fn grad_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feat = rand_tensor(&[4 * 5, 3], &mut rng, -1.0, 1.0);
    let pts = rand_tensor(&[6, 2], &mut rng, 0.05, 0.95);
    check_op(vec![feat, pts], 1e-5, |t, v| t.bilinear_sample(v[0], 4, 5, v[1]));

    let levels = [
        LevelShape { height: 4, width: 4, offset: 0 },
        LevelShape { height: 2, width: 3, offset: 16 },
    ];
    let heads = 2;
    let points = 2;
    let values = rand_tensor(&[22, 4], &mut rng, -1.0, 1.0);
    let loc = rand_tensor(&[3, heads * 2 * points * 2], &mut rng, 0.05, 0.95);
    let weights = rand_tensor(&[3, heads * 2 * points], &mut rng, 0.0, 1.0);
    check_op(vec![values, loc, weights], 1e-5, |t, v| {
        t.deform_sample(v[0], &levels, v[1], v[2], heads)
    });
}

#[test]
fn shared_param_accumulates_and_frozen_is_skipped() {
    let mut store = store_with(&[
        ("a.w", Tensor::vector(vec![2.0])),
        ("b.w", Tensor::vector(vec![5.0])),
    ]);
    store.freeze("b");
    let mut tape = Tape::new();
    let a1 = tape.param(&store, "a.w").unwrap();
    let a2 = tape.param(&store, "a.w").unwrap();
    let b = tape.param(&store, "b.w").unwrap();
    let p = tape.mul(a1, a2).unwrap();
    let p = tape.mul(p, b).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap().into_param_grads(&store);
    assert_eq!(g.len(), 1);
    assert!((g["a.w"][0] - 20.0).abs() < 1e-12);
}

struct Square;

impl Objective for Square {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        Ok(params.tensor("w")?.values().iter().map(|v| v * v).sum())
    }
    fn value_and_grad(&self, params: &ParamStore) -> Result<(f64, GradMap)> {
        let w = params.tensor("w")?;
        let mut g = GradMap::new();
        g.insert("w".into(), w.values().iter().map(|v| 2.0 * v).collect());
        Ok((self.value(params)?, g))
    }
}

struct WrongSquare;

impl Objective for WrongSquare {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        Square.value(params)
    }
    fn value_and_grad(&self, params: &ParamStore) -> Result<(f64, GradMap)> {
        let (v, mut g) = Square.value_and_grad(params)?;
        g.get_mut("w").unwrap()[1] *= 1.5;
        Ok((v, g))
    }
}

#[test]
fn finite_diff_on_square() {
    let store = store_with(&[("w", Tensor::vector(vec![0.5, -1.5, 3.0]))]);
    let opts = CheckOptions::default();
    let r = finite_diff_check(&Square, &store, &opts).unwrap();
    assert!(r.max_rel_err() < 1e-8);
    let r = finite_diff_check(&WrongSquare, &store, &opts).unwrap();
    assert!(r.max_rel_err() > 0.1);
}

#[test]
fn linear_gradcheck_through_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    store.init_linear("l", 3, 2, &mut rng).unwrap();
    let x = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    struct Lin(Tensor);
    impl Objective for Lin {
        fn value(&self, p: &ParamStore) -> Result<f64> {
            Ok(self.value_and_grad(p)?.0)
        }
        fn value_and_grad(&self, p: &ParamStore) -> Result<(f64, GradMap)> {
            let mut t = Tape::new();
            let x = t.constant(self.0.clone());
            let y = nn::linear(&mut t, p, "l", x)?;
            let y = t.gelu(y);
            let yy = t.mul(y, y)?;
            let l = t.sum(yy);
            let v = t.scalar(l);
            Ok((v, t.backward(l)?.into_param_grads(p)))
        }
    }
    let opts = CheckOptions { eps: 1e-5, ..Default::default() };
    let r = finite_diff_check(&Lin(x), &store, &opts).unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}
