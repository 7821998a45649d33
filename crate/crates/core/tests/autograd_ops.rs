//! Forward values and finite-difference adjoint checks for every graph op.

use kramt_core::autograd::{Graph, RowRef, Var};
use kramt_core::gradcheck::{check_graph, GradCheckOptions};
use kramt_core::params::{Bound, ParamStore};
use kramt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.leaf(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = g.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let z = g.leaf(&mat(&[&[0.0, 0.0], &[0.0, 0.0]]));
    let b = g.leaf(&mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let ia = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(ia), &[1.0, 2.0, 3.0, 4.0]);
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.value(az), &[0.0; 4]);
    // Direct arithmetic: [1·5+2·7, 1·6+2·8; 3·5+4·7, 3·6+4·8]
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab), &[19.0, 22.0, 43.0, 50.0]);

    let c = g.leaf(&Tensor::zeros(&[3, 2]));
    assert!(g.matmul(a, c).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!(close(g.value(s), &[1.0 / 3.0; 3], 1e-15));

    let x = g.leaf(&Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!(close(g.value(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));

    let x = g.leaf(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);

    let x = g.leaf(&Tensor::new(vec![3], vec![-1000.0, 0.0, 1000.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!(g.value(s).iter().all(|v| v.is_finite()));
    assert_eq!(g.value(s)[2], 1.0);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma2 = g.leaf(&Tensor::ones(&[2]));
    let beta2 = g.leaf(&Tensor::zeros(&[2]));
    let gamma4 = g.leaf(&Tensor::ones(&[4]));
    let beta4 = g.leaf(&Tensor::zeros(&[4]));

    let x = g.leaf(&Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap());
    let y = g.layer_norm(x, gamma4, beta4, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.0; 4]);

    let x = g.leaf(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gamma2, beta2, 1e-14).unwrap();
    assert!(close(g.value(y), &[1.0, -1.0], 1e-12));

    let x = g.leaf(&Tensor::new(vec![1, 2], vec![2.0, 4.0]).unwrap());
    let y = g.layer_norm(x, gamma2, beta2, 1e-14).unwrap();
    assert!(close(g.value(y), &[-1.0, 1.0], 1e-12));

    assert!(g.layer_norm(x, gamma4, beta4, 1e-5).is_err());
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let z0 = g.leaf(&Tensor::scalar(0.0));
    let l1 = g.bce_with_logits(z0, &[1.0]).unwrap();
    let l0 = g.bce_with_logits(z0, &[0.0]).unwrap();
    assert!((g.value(l1)[0] - 2f64.ln()).abs() < 1e-15);
    assert!((g.value(l0)[0] - 2f64.ln()).abs() < 1e-15);
    let z20 = g.leaf(&Tensor::scalar(20.0));
    let l = g.bce_with_logits(z20, &[1.0]).unwrap();
    assert!(g.value(l)[0] <= 1e-8);
    // Large magnitudes stay finite in the log domain.
    let zbig = g.leaf(&Tensor::scalar(-800.0));
    let l = g.bce_with_logits(zbig, &[1.0]).unwrap();
    assert!((g.value(l)[0] - 800.0).abs() < 1e-9);
    assert!(g.bce_with_logits(z0, &[0.5]).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.leaf(&Tensor::zeros(&[1, 8]));
    let l = g.cross_entropy(uniform, &[3], &[true]).unwrap();
    assert!((g.value(l)[0] - 8f64.ln()).abs() < 1e-14);

    let mut peaked = vec![0.0; 8];
    peaked[5] = 100.0;
    let p = g.leaf(&Tensor::new(vec![1, 8], peaked).unwrap());
    let l = g.cross_entropy(p, &[5], &[true]).unwrap();
    assert!(g.value(l)[0] < 1e-40);

    let two = g.leaf(&Tensor::new(vec![2, 3], vec![0.1, 0.7, -0.4, 2.0, -1.0, 0.3]).unwrap());
    let single = g.leaf(&Tensor::new(vec![1, 3], vec![0.1, 0.7, -0.4]).unwrap());
    let masked = g.cross_entropy(two, &[1, 2], &[true, false]).unwrap();
    let alone = g.cross_entropy(single, &[1], &[true]).unwrap();
    assert_eq!(g.value(masked)[0], g.value(alone)[0]);

    let p = g.param(&Tensor::new(vec![2, 3], vec![0.1, 0.7, -0.4, 2.0, -1.0, 0.3]).unwrap());
    let none = g.cross_entropy(p, &[0, 0], &[false, false]).unwrap();
    assert_eq!(g.value(none)[0], 0.0);
    let grads = g.backward(none).unwrap();
    assert!(grads.get(p).map_or(true, |gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_examples() {
    // loss = x² at x = 3 → 6
    let mut g = Graph::new();
    let x = g.param(&Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);

    // loss = sum(A·B): dA = 1·Bᵀ, dB = Aᵀ·1
    let mut g = Graph::new();
    let a = g.param(&mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
    let b = g.param(&mat(&[&[1.0, -1.0], &[0.5, 2.0], &[-3.0, 0.0]]));
    let ab = g.matmul(a, b).unwrap();
    let loss = g.sum(ab);
    let grads = g.backward(loss).unwrap();
    // Row sums of B, repeated for each row of A.
    assert_eq!(grads.get(a).unwrap(), &[0.0, 2.5, -3.0, 0.0, 2.5, -3.0]);
    // Column sums of A, repeated for each column of B.
    assert_eq!(grads.get(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);

    let mut g = Graph::new();
    let v = g.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(g.backward(v).is_err());
}

#[test]
fn reused_value_receives_summed_adjoints() {
    // y = W·x used twice versus two separately-created copies of W.
    let w = mat(&[&[0.3, -0.2], &[0.5, 0.1]]);
    let x = mat(&[&[1.0], &[2.0]]);
    let shared = {
        let mut g = Graph::new();
        let wv = g.param(&w);
        let xv = g.leaf(&x);
        let y1 = g.matmul(wv, xv).unwrap();
        let y2 = g.matmul(wv, xv).unwrap();
        let y2 = g.gelu(y2);
        let s = g.add(y1, y2).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap().get(wv).unwrap().to_vec()
    };
    let (d1, d2) = {
        let mut g = Graph::new();
        let w1 = g.param(&w);
        let w2 = g.param(&w);
        let xv = g.leaf(&x);
        let y1 = g.matmul(w1, xv).unwrap();
        let y2 = g.matmul(w2, xv).unwrap();
        let y2 = g.gelu(y2);
        let s = g.add(y1, y2).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        (grads.get(w1).unwrap().to_vec(), grads.get(w2).unwrap().to_vec())
    };
    let summed: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a + b).collect();
    assert!(close(&shared, &summed, 1e-15));
}

#[test]
fn attention_rows_are_distributions_over_visible_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (batch, seq, d, heads) = (3, 6, 8, 2);
    let mut g = Graph::new();
    let q = g.leaf(&Tensor::randn(&[batch * seq, d], 1.0, &mut rng));
    let k = g.leaf(&Tensor::randn(&[batch * seq, d], 1.0, &mut rng));
    let v = g.leaf(&Tensor::randn(&[batch * seq, d], 1.0, &mut rng));
    let mask: Vec<bool> = (0..batch * seq).map(|i| i % seq != 2 && i != 11).collect();
    let out = g.attention(q, k, v, &mask, batch, seq, heads).unwrap();
    let probs = g.attention_probs(out).unwrap();
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let row = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                if !mask[b * seq + i] {
                    assert!(row.iter().all(|&p| p == 0.0));
                    continue;
                }
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for j in 0..seq {
                    assert!((0.0..=1.0).contains(&row[j]));
                    if !mask[b * seq + j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}

/// Builds a loss from a random projection of `out` so that every output
/// coordinate carries a distinct adjoint.
fn project(g: &mut Graph, out: Var, rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5eed_0f_11);
    let shape = g.shape(out).to_vec();
    let w = g.leaf(&Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn check(params: &mut ParamStore, build: impl Fn(&mut Graph, &Bound) -> kramt_core::Result<Var>) -> f64 {
    let opts = GradCheckOptions {
        coords_per_param: 12,
        ..GradCheckOptions::default()
    };
    let report = check_graph(params, build, &opts).unwrap();
    assert!(report.checked > 0, "{report:?}");
    if report.max_rel_error > 1e-4 {
        eprintln!("{report:?}");
    }
    report.max_rel_error
}

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let a = p.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let b = p.insert("b", Tensor::randn(&[4, 5], 1.0, &mut rng)).unwrap();
        let c = p.insert("c", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let bias = p.insert("bias", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        let gamma = p.insert("gamma", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        let beta = p.insert("beta", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        let bt = p.insert("bt", Tensor::randn(&[5, 4], 1.0, &mut rng)).unwrap();

        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &Bound) -> kramt_core::Result<Var>>)> = vec![
            ("matmul", Box::new(move |g, v| {
                let y = g.matmul(v[a], v[b])?;
                Ok(project(g, y, seed))
            })),
            ("matmul_nt", Box::new(move |g, v| {
                let y = g.matmul_nt(v[a], v[bt])?;
                Ok(project(g, y, seed))
            })),
            ("add_mul_scale", Box::new(move |g, v| {
                let s = g.add(v[a], v[c])?;
                let m = g.mul(s, v[a])?;
                let y = g.scale(m, -1.7);
                Ok(project(g, y, seed))
            })),
            ("add_row", Box::new(move |g, v| {
                let y = g.add_row(v[a], v[bias])?;
                Ok(project(g, y, seed))
            })),
            ("relu", Box::new(move |g, v| {
                let y = g.relu(v[a]);
                Ok(project(g, y, seed))
            })),
            ("gelu", Box::new(move |g, v| {
                let y = g.gelu(v[a]);
                Ok(project(g, y, seed))
            })),
            ("softmax_last", Box::new(move |g, v| {
                let y = g.softmax(v[a], 1)?;
                Ok(project(g, y, seed))
            })),
            ("softmax_first", Box::new(move |g, v| {
                let y = g.softmax(v[a], 0)?;
                Ok(project(g, y, seed))
            })),
            ("layer_norm", Box::new(move |g, v| {
                let y = g.layer_norm(v[a], v[gamma], v[beta], 1e-5)?;
                Ok(project(g, y, seed))
            })),
            ("layer_norm_matmul", Box::new(move |g, v| {
                let y = g.layer_norm(v[a], v[gamma], v[beta], 1e-5)?;
                let y = g.matmul(y, v[b])?;
                Ok(project(g, y, seed))
            })),
            ("gather_rows", Box::new(move |g, v| {
                let idx: Vec<RowRef> = vec![Some((1, 2)), None, Some((0, 0)), Some((1, 2)), Some((0, 1))];
                let y = g.gather_rows(&[v[a], v[c]], &idx)?;
                Ok(project(g, y, seed))
            })),
            ("masked_mean_pool", Box::new(move |g, v| {
                let y = g.masked_mean_pool(v[bt], &[true, false, true, true, true], 1, 5)?;
                Ok(project(g, y, seed))
            })),
            ("l2_normalize", Box::new(move |g, v| {
                let y = g.l2_normalize_rows(v[a])?;
                Ok(project(g, y, seed))
            })),
            ("mean", Box::new(move |g, v| {
                let m = g.mul(v[a], v[c])?;
                Ok(g.mean(m))
            })),
            ("bce", Box::new(move |g, v| {
                g.bce_with_logits(v[a], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
            })),
            ("cross_entropy", Box::new(move |g, v| {
                g.cross_entropy(v[a], &[0, 3, 2], &[true, false, true])
            })),
        ];
        for (name, build) in cases {
            let err = check(&mut p, build);
            assert!(err < 1e-4, "{name} seed {seed}: max rel error {err:e}");
        }
    }
}

#[test]
fn attention_matches_finite_differences_over_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (batch, seq, d, heads) = (2, 4, 6, 2);
        let mut p = ParamStore::new();
        let q = p.insert("q", Tensor::randn(&[batch * seq, d], 1.0, &mut rng)).unwrap();
        let k = p.insert("k", Tensor::randn(&[batch * seq, d], 1.0, &mut rng)).unwrap();
        let v = p.insert("v", Tensor::randn(&[batch * seq, d], 1.0, &mut rng)).unwrap();
        let mask: Vec<bool> = (0..batch * seq).map(|_| rng.gen_bool(0.8)).collect();
        let err = check(&mut p, move |g, b| {
            let y = g.attention(b[q], b[k], b[v], &mask, batch, seq, heads)?;
            Ok(project(g, y, seed))
        });
        assert!(err < 1e-4, "attention seed {seed}: {err:e}");
    }
}

proptest::proptest! {
    #[test]
    fn layer_norm_rows_are_standardised(seed in 0u64..10_000, rows in 1usize..6, cols in 2usize..32, scale in 1e-2f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::randn(&[rows, cols], scale, &mut rng));
        let gamma = g.leaf(&Tensor::ones(&[cols]));
        let beta = g.leaf(&Tensor::zeros(&[cols]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for r in g.value(y).chunks(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            proptest::prop_assert!(mean.abs() < 1e-6, "mean {}", mean);
            proptest::prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn softmax_is_stable_at_magnitude_1e3(seed in 0u64..10_000, n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::randn(&[2, n], 1e3, &mut rng));
        let s = g.softmax(x, 1).unwrap();
        for r in g.value(s).chunks(n) {
            proptest::prop_assert!(r.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            proptest::prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..10_000, seq in 1usize..8, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let mut g = Graph::new();
        let q = g.leaf(&Tensor::randn(&[2 * seq, d], 3.0, &mut rng));
        let k = g.leaf(&Tensor::randn(&[2 * seq, d], 3.0, &mut rng));
        let v = g.leaf(&Tensor::randn(&[2 * seq, d], 1.0, &mut rng));
        let mut mask: Vec<bool> = (0..2 * seq).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        mask[seq] = true;
        let out = g.attention(q, k, v, &mask, 2, seq, heads).unwrap();
        let probs = g.attention_probs(out).unwrap();
        for (i, row) in probs.chunks(seq).enumerate() {
            let b = i / (heads * seq);
            if mask[b * seq + i % seq] {
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
