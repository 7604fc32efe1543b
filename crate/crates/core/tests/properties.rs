//! Randomized invariants over the tensor core and attention machinery.

use proptest::prelude::*;
use std::rc::Rc;
use styletrans_core::attention::{scaled_dot_attention, window_partition, window_reverse, WindowPlan};
use styletrans_core::feature::FeatureMap;
use styletrans_core::snapshot::{snapshot_from_bytes, snapshot_to_bytes};
use styletrans_core::tensor::{ParamGroup, ParamStore, Tensor};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = styletrans_core::Rng::new(seed);
        let x = Tensor::uniform(&[rows, cols], -10.0, 10.0, &mut rng);
        let y = x.softmax_rows().unwrap();
        let data = y.to_vec();
        for row in data.chunks_exact(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn forward_ops_stay_finite(data in finite_vec(24)) {
        let x = Tensor::from_vec(data, &[6, 4]).unwrap();
        for t in [
            x.relu().unwrap(),
            x.square().unwrap(),
            x.abs_elem().unwrap(),
            x.softmax_rows().unwrap(),
            x.norm_cols(1e-5).unwrap(),
            x.col_mean().unwrap(),
            x.col_std().unwrap(),
            x.matmul_nt(&x).unwrap(),
            x.sum(),
        ] {
            prop_assert!(t.all_finite());
        }
    }

    #[test]
    fn window_partition_is_a_bijection(
        h in 1usize..7,
        w in 1usize..7,
        window in 1usize..5,
        shift_raw in 0usize..5,
        seed in any::<u64>(),
    ) {
        let shift = shift_raw % window;
        let mut rng = styletrans_core::Rng::new(seed);
        let c = 2;
        let f = FeatureMap::new(Tensor::uniform(&[h * w, c], -5.0, 5.0, &mut rng), h, w).unwrap();
        let plan = WindowPlan::new(h, w, window, shift).unwrap();
        let windows = window_partition(&f, &plan).unwrap();
        let back = window_reverse(&windows, &plan, f.grid()).unwrap();
        let (a, b) = (f.tensor().to_vec(), back.tensor().to_vec());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one(
        nq in 1usize..5,
        nk in 1usize..6,
        d in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = styletrans_core::Rng::new(seed);
        let q = Tensor::uniform(&[nq, d], -3.0, 3.0, &mut rng);
        let k = Tensor::uniform(&[nk, d], -3.0, 3.0, &mut rng);
        let v = Tensor::uniform(&[nk, d], -3.0, 3.0, &mut rng);
        let (_, weights) = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in weights.to_vec().chunks_exact(nk) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_kv_permutation_invariance(seed in any::<u64>(), rot in 0usize..5) {
        let mut rng = styletrans_core::Rng::new(seed);
        let (nk, d) = (5usize, 3usize);
        let q = Tensor::uniform(&[2, d], -3.0, 3.0, &mut rng);
        let k = Tensor::uniform(&[nk, d], -3.0, 3.0, &mut rng);
        let v = Tensor::uniform(&[nk, d], -3.0, 3.0, &mut rng);
        let rotate = |t: &Tensor| {
            let data = t.to_vec();
            let mut out = Vec::with_capacity(data.len());
            for i in 0..nk {
                let src = (i + rot) % nk;
                out.extend_from_slice(&data[src * d..(src + 1) * d]);
            }
            Tensor::from_vec(out, &[nk, d]).unwrap()
        };
        let (base, _) = scaled_dot_attention(&q, &k, &v).unwrap();
        let (perm, _) = scaled_dot_attention(&q, &rotate(&k), &rotate(&v)).unwrap();
        for (a, b) in base.to_vec().iter().zip(perm.to_vec()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_bytes_roundtrip(seed in any::<u64>(), n1 in 1usize..30, n2 in 1usize..30) {
        let mut rng = styletrans_core::Rng::new(seed);
        let mut store = ParamStore::new();
        store
            .register("a", Tensor::uniform(&[n1], -1e6, 1e6, &mut rng), ParamGroup::StyleEncoder)
            .unwrap();
        store
            .register("b.c", Tensor::uniform(&[n2, 2], -1.0, 1.0, &mut rng), ParamGroup::Other)
            .unwrap();
        let snap = store.snapshot();
        let back = snapshot_from_bytes(&snapshot_to_bytes(&snap)).unwrap();
        prop_assert_eq!(snap.entries.len(), back.entries.len());
        for (x, y) in snap.entries.iter().zip(&back.entries) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert_eq!(x.group, y.group);
            prop_assert_eq!(&x.shape, &y.shape);
            for (p, q) in x.values.iter().zip(&y.values) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn gather_scatter_gradient_counts_uses(seed in any::<u64>()) {
        // The gradient of sum(gather(x)) counts how often each element was
        // picked, regardless of order and padding.
        let mut rng = styletrans_core::Rng::new(seed);
        let x = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        x.set_requires_grad(true);
        let mut counts = [0usize; 6];
        let mut idx = Vec::new();
        for _ in 0..10 {
            let i = rng.below(7);
            if i == 6 {
                idx.push(usize::MAX);
            } else {
                idx.push(i);
                counts[i] += 1;
            }
        }
        let idx: Rc<[usize]> = idx.into();
        let y = x.gather_elems(idx, &[10]).unwrap();
        y.sum().backward().unwrap();
        let grad = x.grad().unwrap();
        for (g, c) in grad.iter().zip(counts) {
            prop_assert!((g - c as f64).abs() < 1e-12);
        }
    }
}
