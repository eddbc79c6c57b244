//! Brute-force oracle for memory querying and responding: full distance
//! matrix, full sort, softmax over the selected distances, explicit weighted
//! sums — no shared code with the implementation.

mod common;

use cmn_core::memory::{
    self, query, query_and_respond, respond, MemoryBinding, MemoryHeads, MemoryMatrix,
};
use cmn_core::tensor::Graph;
use cmn_core::Features;
use common::{assert_grads_close, finite_difference, random_vec, rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    len: usize,
    slots: usize,
    dim: usize,
    heads: usize,
    k: usize,
    features: Features,
    mem: MemoryMatrix,
    proj: MemoryHeads,
}

fn random_setup(r: &mut ChaCha8Rng, heads: usize) -> Setup {
    let dim = heads * (1 + r.gen_range(0..4)); // d_h in 1..=4
    let slots = 1 + r.gen_range(0..64);
    let k = 1 + r.gen_range(0..slots);
    let len = 1 + r.gen_range(0..6);
    let dh = dim / heads;
    let features = Features::new(len, dim, random_vec(r, len * dim, 1.0)).unwrap();
    let mem = MemoryMatrix::new(slots, dim, random_vec(r, slots * dim, 1.0)).unwrap();
    let proj = MemoryHeads {
        heads,
        dim,
        wq: (0..heads).map(|_| random_vec(r, dim * dh, 1.0)).collect(),
        wk: (0..heads).map(|_| random_vec(r, dim * dh, 1.0)).collect(),
        wv: (0..heads).map(|_| random_vec(r, dim * dh, 1.0)).collect(),
        wo: random_vec(r, dim * dim, 1.0),
    };
    Setup {
        len,
        slots,
        dim,
        heads,
        k,
        features,
        mem,
        proj,
    }
}

/// Dense reference: returns (responses, per position/head (indices, weights)).
#[allow(clippy::needless_range_loop)]
fn brute_force(s: &Setup) -> (Vec<f64>, Vec<Vec<(Vec<usize>, Vec<f64>)>>) {
    let dh = s.dim / s.heads;
    let mat = |m: &[f64], row: usize, w: &[f64], col: usize| -> f64 {
        // (row of m) . (column col of w), w is dim x dh
        (0..s.dim).map(|i| m[row * s.dim + i] * w[i * dh + col]).sum()
    };
    let mut picks = vec![Vec::new(); s.len];
    let mut joined = vec![0.0; s.len * s.dim];
    for h in 0..s.heads {
        for p in 0..s.len {
            // q = x_p . Wq^(h), k_i = m_i . Wk^(h), D_i = q k_i^T / sqrt(dh)
            let mut dist = vec![0.0; s.slots];
            for i in 0..s.slots {
                let mut dot = 0.0;
                for c in 0..dh {
                    let q = mat(&s.features.data, p, &s.proj.wq[h], c);
                    let k = mat(&s.mem.data, i, &s.proj.wk[h], c);
                    dot += q * k;
                }
                dist[i] = dot / (dh as f64).sqrt();
            }
            // full sort, stable ties toward the lower index
            let mut order: Vec<usize> = (0..s.slots).collect();
            order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
            let selected = &order[..s.k];
            // softmax over the selected distances
            let exps: Vec<f64> = selected.iter().map(|&i| dist[i].exp()).collect();
            let denom: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();
            // response = sum_i w_i (m_i . Wv)
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, &i) in selected.iter().enumerate() {
                    acc += weights[j] * mat(&s.mem.data, i, &s.proj.wv[h], c);
                }
                joined[p * s.dim + h * dh + c] = acc;
            }
            picks[p].push((selected.to_vec(), weights));
        }
    }
    // output projection
    let mut out = vec![0.0; s.len * s.dim];
    for p in 0..s.len {
        for j in 0..s.dim {
            let mut acc = 0.0;
            for i in 0..s.dim {
                acc += joined[p * s.dim + i] * s.proj.wo[i * s.dim + j];
            }
            out[p * s.dim + j] = acc;
        }
    }
    (out, picks)
}

#[test]
fn query_respond_matches_dense_oracle_on_random_instances() {
    let mut r = rng(42);
    let mut done = 0;
    while done < 100 {
        for &heads in &[1usize, 2, 4] {
            let s = random_setup(&mut r, heads);
            let (want, picks) = brute_force(&s);
            let (got, trace) = query_and_respond(&s.features, &s.mem, &s.proj, s.k).unwrap();
            assert_eq!(got.len, s.len);
            for (g, w) in got.data.iter().zip(&want) {
                assert!(
                    (g - w).abs() < 1e-10,
                    "response deviates: {g} vs {w} (N={} K={} H={heads})",
                    s.slots,
                    s.k
                );
            }
            for p in 0..s.len {
                for h in 0..s.heads {
                    let e = trace.entry(p, h);
                    let (ref idx, ref wts) = picks[p][h];
                    assert_eq!(&e.indices, idx);
                    for (a, b) in e.weights.iter().zip(wts) {
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
            done += 1;
        }
    }
}

#[test]
fn query_then_respond_composes_to_query_and_respond() {
    let mut r = rng(43);
    for _ in 0..10 {
        let s = random_setup(&mut r, 2);
        let (full, trace) = query_and_respond(&s.features, &s.mem, &s.proj, s.k).unwrap();
        let trace2 = query(&s.features, &s.mem, &s.proj, s.k).unwrap();
        let resp = respond(&trace2, &s.mem, &s.proj).unwrap();
        for (a, b) in full.data.iter().zip(&resp.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(trace.entry(0, 0).indices, trace2.entry(0, 0).indices);
    }
}

#[test]
fn trace_weights_are_positive_distinct_and_normalized() {
    let mut r = rng(44);
    for _ in 0..25 {
        let s = random_setup(&mut r, 2);
        let trace = query(&s.features, &s.mem, &s.proj, s.k).unwrap();
        for e in &trace.entries {
            assert_eq!(e.indices.len(), s.k);
            let mut sorted = e.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), s.k, "indices must be distinct");
            assert!(e.indices.iter().all(|&i| i < s.slots));
            assert!(e.weights.iter().all(|&w| w > 0.0));
            let total: f64 = e.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn query_is_permutation_equivariant_over_positions() {
    let mut r = rng(45);
    let s = random_setup(&mut r, 2);
    let trace = query(&s.features, &s.mem, &s.proj, s.k).unwrap();
    // reverse the positions
    let mut rev = Vec::new();
    for p in (0..s.len).rev() {
        rev.extend_from_slice(s.features.vector(p));
    }
    let rev_features = Features::new(s.len, s.dim, rev).unwrap();
    let rev_trace = query(&rev_features, &s.mem, &s.proj, s.k).unwrap();
    for p in 0..s.len {
        for h in 0..s.heads {
            let a = trace.entry(p, h);
            let b = rev_trace.entry(s.len - 1 - p, h);
            assert_eq!(a.indices, b.indices);
            assert_eq!(a.weights, b.weights);
        }
    }
}

#[test]
fn k_equal_n_matches_dense_softmax() {
    let mut r = rng(46);
    for _ in 0..10 {
        let mut s = random_setup(&mut r, 1);
        s.k = s.slots;
        let trace = query(&s.features, &s.mem, &s.proj, s.k).unwrap();
        for e in &trace.entries {
            // dense softmax over all N distances, then matched up by index
            let exps: Vec<f64> = e.distances.iter().map(|d| d.exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (j, &_i) in e.indices.iter().enumerate() {
                assert!((e.weights[j] - exps[j] / denom).abs() < 1e-12);
            }
            // every slot selected exactly once
            let mut seen: Vec<usize> = e.indices.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..s.slots).collect::<Vec<_>>());
        }
    }
}

#[test]
fn respond_is_linear_in_the_weights() {
    let mut r = rng(47);
    let s = random_setup(&mut r, 2);
    let trace = query(&s.features, &s.mem, &s.proj, s.k).unwrap();
    if s.k < 2 {
        return;
    }
    let mut t1 = trace.clone();
    let mut t2 = trace.clone();
    for (e1, e2) in t1.entries.iter_mut().zip(t2.entries.iter_mut()) {
        e1.weights = vec![0.0; s.k];
        e1.weights[0] = 1.0;
        e2.weights = vec![0.0; s.k];
        e2.weights[1] = 1.0;
    }
    let alpha = 0.3;
    let mut blended = trace.clone();
    for e in blended.entries.iter_mut() {
        e.weights = vec![0.0; s.k];
        e.weights[0] = alpha;
        e.weights[1] = 1.0 - alpha;
    }
    let r1 = respond(&t1, &s.mem, &s.proj).unwrap();
    let r2 = respond(&t2, &s.mem, &s.proj).unwrap();
    let rb = respond(&blended, &s.mem, &s.proj).unwrap();
    for i in 0..rb.data.len() {
        let want = alpha * r1.data[i] + (1.0 - alpha) * r2.data[i];
        assert!((rb.data[i] - want).abs() < 1e-10);
    }
}

#[test]
fn scaling_uses_per_head_dimension() {
    // One head, d = 4: distance must be q.k / sqrt(4); with two heads over
    // the same d the divisor becomes sqrt(2).
    let dim = 4;
    let eye: Vec<f64> = {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        m
    };
    let mem = MemoryMatrix::new(1, dim, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let one_head = MemoryHeads {
        heads: 1,
        dim,
        wq: vec![eye.clone()],
        wk: vec![eye.clone()],
        wv: vec![eye.clone()],
        wo: eye.clone(),
    };
    let features = Features::new(1, dim, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let trace = query(&features, &mem, &one_head, 1).unwrap();
    // q.k = 4, sqrt(d_h) = 2
    assert!((trace.entry(0, 0).distances[0] - 4.0 / 2.0).abs() < 1e-12);

    // two heads, each projecting onto its half: q.k per head = 2, sqrt(2)
    let half = |offset: usize| -> Vec<f64> {
        let mut m = vec![0.0; dim * 2];
        for i in 0..2 {
            m[(offset + i) * 2 + i] = 1.0;
        }
        m
    };
    let two_heads = MemoryHeads {
        heads: 2,
        dim,
        wq: vec![half(0), half(2)],
        wk: vec![half(0), half(2)],
        wv: vec![half(0), half(2)],
        wo: eye,
    };
    let trace = query(&features, &mem, &two_heads, 1).unwrap();
    assert!((trace.entry(0, 0).distances[0] - 2.0 / 2.0f64.sqrt()).abs() < 1e-12);
}

#[test]
fn query_respond_gradients_match_finite_differences() {
    // Unit-scale random data keeps top-k selections stable under the FD step.
    let mut r = rng(48);
    let heads = 2;
    let dim = 4;
    let dh = 2;
    let slots = 6;
    let k = 3;
    let len = 2;
    let probe = random_vec(&mut r, len * dim, 1.0);

    let inputs = vec![
        random_vec(&mut r, len * dim, 1.0),      // features
        random_vec(&mut r, slots * dim, 1.0),    // memory matrix
        random_vec(&mut r, dim * dh, 1.0),       // wq head 0
        random_vec(&mut r, dim * dh, 1.0),       // wq head 1
        random_vec(&mut r, dim * dh, 1.0),       // wk head 0
        random_vec(&mut r, dim * dh, 1.0),       // wk head 1
        random_vec(&mut r, dim * dh, 1.0),       // wv head 0
        random_vec(&mut r, dim * dh, 1.0),       // wv head 1
        random_vec(&mut r, dim * dim, 1.0),      // wo
    ];

    let run = |data: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let features = g.leaf(data[0].clone(), vec![len, dim], true).unwrap();
        let matrix = g.leaf(data[1].clone(), vec![slots, dim], true).unwrap();
        let wq: Vec<_> = (0..heads)
            .map(|h| g.leaf(data[2 + h].clone(), vec![dim, dh], true).unwrap())
            .collect();
        let wk: Vec<_> = (0..heads)
            .map(|h| g.leaf(data[4 + h].clone(), vec![dim, dh], true).unwrap())
            .collect();
        let wv: Vec<_> = (0..heads)
            .map(|h| g.leaf(data[6 + h].clone(), vec![dim, dh], true).unwrap())
            .collect();
        let wo = g.leaf(data[8].clone(), vec![dim, dim], true).unwrap();
        let ids = [
            features, matrix, wq[0], wq[1], wk[0], wk[1], wv[0], wv[1], wo,
        ];
        let binding = MemoryBinding {
            slots,
            dim,
            heads,
            matrix,
            wq,
            wk,
            wv,
            wo,
        };
        let (resp, _) = memory::attach_query_respond(&mut g, features, &binding, k).unwrap();
        let w = g.constant(probe.clone(), vec![len, dim]).unwrap();
        let p = g.mul(resp, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        let grads = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
        (g.data(loss)[0], grads)
    };

    let (_, analytic) = run(&inputs);
    let numeric = finite_difference(&inputs, |data| run(data).0);
    let names = [
        "features", "matrix", "wq0", "wq1", "wk0", "wk1", "wv0", "wv1", "wo",
    ];
    for ((a, n), name) in analytic.iter().zip(&numeric).zip(names) {
        assert_grads_close(a, n, 1e-4, name);
    }
}
