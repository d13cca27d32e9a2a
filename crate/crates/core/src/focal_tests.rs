use super::*;
use crate::gradcheck::{check, GradCheckOptions};
use crate::params::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn fsm_setup(kernels: &[usize], c: usize, seed: u64) -> (ParamStore<f64>, FsmParams) {
    let mut store = ParamStore::new();
    let cfg = FsmConfig { kernels: kernels.to_vec() };
    let p = FsmParams::init(&mut Init::new(&mut store, seed), "fsm", &cfg, c).unwrap();
    (store, p)
}

fn lrsm_setup(c: usize, rank: usize, bank: usize, seed: u64) -> (ParamStore<f64>, LowRankMemory) {
    let mut store = ParamStore::new();
    let cfg = LrsmConfig { rank: Some(rank), bank };
    let m = LowRankMemory::init(&mut Init::new(&mut store, seed), "lrsm", &cfg, c).unwrap();
    (store, m)
}

fn identity(c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 })
}

/// Parameters first, the input last: leaf `i` is parameter `i`.
fn block_inputs(store: &ParamStore<f64>, x: Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut v = store.values().to_vec();
    v.push(x);
    v
}

#[test]
fn receptive_fields_accumulate() {
    let cfg = FsmConfig { kernels: vec![3, 3, 3] };
    assert_eq!(cfg.receptive_fields(), vec![3, 5, 7]);
    assert_eq!(FsmConfig::default().receptive_fields(), vec![3, 7]);
}

#[test]
fn config_rejects_even_or_missing_kernels() {
    assert!(FsmConfig { kernels: vec![] }.validate().is_err());
    assert!(FsmConfig { kernels: vec![3, 4] }.validate().is_err());
    assert!(LrsmConfig { rank: Some(9), bank: 4 }.validate(8).is_err());
    assert!(LrsmConfig { rank: Some(2), bank: 0 }.validate(8).is_err());
    assert_eq!(LrsmConfig::default().rank_for(16), 4);
    assert_eq!(LrsmConfig::default().rank_for(64), 16);
    assert_eq!(LrsmConfig::default().rank_for(2), 2);
}

fn impulse_support(kernels: &[usize]) -> Vec<(usize, usize)> {
    let (h, c) = (17, 2);
    let (mut store, p) = fsm_setup(kernels, c, 1);
    store.set(p.f_z.w, identity(c)).unwrap();
    for &k in &p.context {
        let shape = store.get(k).shape().to_vec();
        store.set(k, Tensor::full(&shape, 0.5)).unwrap();
    }
    let mut x = Tensor::zeros(&[h, h, c]);
    x.data_mut()[(8 * h + 8) * c] = 1.0;
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x);
    let levels = hierarchical_contextualize(&mut tape, xv, &p, ContextActivation::Gelu).unwrap();
    let mut supports = Vec::new();
    for &z in &levels[..kernels.len()] {
        let v = tape.value(z);
        let (mut rows, mut cols) = (Vec::new(), Vec::new());
        for r in 0..h {
            for col in 0..h {
                if v.at(&[r, col, 0]) != 0.0 {
                    rows.push(r);
                    cols.push(col);
                }
                // channel 1 never saw the impulse
                assert_eq!(v.at(&[r, col, 1]), 0.0);
            }
        }
        let extent = |s: &[usize]| s.iter().max().unwrap() - s.iter().min().unwrap() + 1;
        assert_eq!(rows.len(), extent(&rows) * extent(&cols), "support must be a full square");
        supports.push((extent(&rows), extent(&cols)));
    }
    supports
}

#[test]
fn impulse_response_support_matches_receptive_field() {
    for kernels in [vec![3, 3, 3], vec![3, 5], vec![1, 3, 5]] {
        let cfg = FsmConfig { kernels: kernels.clone() };
        let expected: Vec<(usize, usize)> = cfg.receptive_fields().into_iter().map(|r| (r, r)).collect();
        assert_eq!(impulse_support(&kernels), expected, "kernels {kernels:?}");
    }
}

#[test]
fn constant_input_stays_constant_away_from_borders() {
    let (h, c) = (16, 3);
    let (mut store, p) = fsm_setup(&[3, 5], c, 2);
    store.set(p.f_z.w, identity(c)).unwrap();
    for &k in &p.context {
        let shape = store.get(k).shape().to_vec();
        let taps = (shape[0] * shape[1]) as f64;
        store.set(k, Tensor::full(&shape, 1.0 / taps)).unwrap();
    }
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::from_fn(&[h, h, c], |i| 0.25 + (i % c) as f64));
    let levels = hierarchical_contextualize(&mut tape, x, &p, ContextActivation::Identity).unwrap();
    // zero padding perturbs the outer (r - 1) / 2 ring of level l
    let margins = [1, 3];
    for (l, &z) in levels[..2].iter().enumerate() {
        let v = tape.value(z);
        let m = margins[l];
        for r in m..h - m {
            for col in m..h - m {
                for ch in 0..c {
                    let want = 0.25 + ch as f64;
                    assert!((v.at(&[r, col, ch]) - want).abs() < 1e-12);
                }
            }
        }
    }
    assert_eq!(tape.shape(levels[2]), &[1, 1, c]);
}

#[test]
fn one_hot_gates_select_single_level() {
    let mut tape = Tape::new();
    let levels: Vec<Var> = (0..3).map(|l| tape.constant(rand_t(&[4, 4, 8], 10 + l))).collect();
    for j in 0..3 {
        let gates = tape.constant(Tensor::from_fn(&[4, 4, 3], |i| if i % 3 == j { 1.0 } else { 0.0 }));
        let z = gated_aggregate(&mut tape, gates, &levels).unwrap();
        assert_eq!(tape.value(z), tape.value(levels[j]));
    }
    let zeros = tape.constant(Tensor::zeros(&[4, 4, 3]));
    let z = gated_aggregate(&mut tape, zeros, &levels).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gated_aggregate_matches_direct_summation() {
    let (h, w, c, l) = (4, 4, 8, 3);
    let gates = rand_t(&[h, w, l], 20);
    let zs: Vec<Tensor<f64>> = (0..l as u64).map(|i| rand_t(&[h, w, c], 21 + i)).collect();
    // the global level is stored pooled and broadcast
    let global = rand_t(&[1, 1, 1, c], 30);
    let mut tape = Tape::new();
    let mut vars: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
    vars.push(tape.constant(global.clone()));
    let g_all = gates.data().to_vec();
    let gates_full = tape.constant(Tensor::from_fn(&[1, h, w, l + 1], |i| {
        let (pix, lev) = (i / (l + 1), i % (l + 1));
        if lev < l {
            g_all[pix * l + lev]
        } else {
            0.5 + pix as f64 * 0.01
        }
    }));
    let z = gated_aggregate(&mut tape, gates_full, &vars).unwrap();
    let got = tape.value(z);
    assert_eq!(got.shape(), &[1, h, w, c]);
    for pix in 0..h * w {
        for ch in 0..c {
            let mut acc = g_all[pix * l] * zs[0].data()[pix * c + ch];
            for lev in 1..l {
                acc += g_all[pix * l + lev] * zs[lev].data()[pix * c + ch];
            }
            acc += (0.5 + pix as f64 * 0.01) * global.data()[ch];
            assert_eq!(got.data()[pix * c + ch], acc);
        }
    }
}

#[test]
fn gated_aggregate_rejects_gate_count_mismatch() {
    let mut tape = Tape::new();
    let levels: Vec<Var> = (0..3).map(|l| tape.constant(rand_t(&[2, 2, 4], l))).collect();
    let gates = tape.constant(Tensor::zeros(&[2, 2, 2]));
    assert!(matches!(gated_aggregate(&mut tape, gates, &levels), Err(Error::Shape { .. })));
}

#[test]
fn fsm_preserves_shape_and_maps_zero_to_zero() {
    let (store, p) = fsm_setup(&[3, 5], 6, 3);
    for shape in [vec![5, 7, 6], vec![2, 4, 4, 6]] {
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(rand_t(&shape, 4));
        let y = fsm_forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(y), &shape[..]);
        let z = tape.constant(Tensor::zeros(&shape));
        let y0 = fsm_forward(&mut tape, z, &p).unwrap();
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }
    let mut tape = Tape::with_params(&store);
    let bad = tape.constant(Tensor::zeros(&[4, 4, 5]));
    assert!(fsm_forward(&mut tape, bad, &p).is_err());
}

#[test]
fn fsm_gradients_match_finite_differences() {
    let (store, p) = fsm_setup(&[3, 5], 4, 5);
    let inputs = block_inputs(&store, rand_t(&[1, 6, 6, 4], 6));
    let checked: Vec<usize> = (0..inputs.len()).collect();
    let r = check("fsm", &inputs, &checked, GradCheckOptions::default(), |t, _| {
        let x = t.leaf_var(inputs.len() - 1);
        fsm_forward(t, x, &p)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

fn memory_oracle(q: &[f64], m: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (k, b) = (m.shape()[0], m.shape()[1]);
    let logits: Vec<f64> = (0..b).map(|j| (0..k).map(|i| q[i] * m.at(&[i, j])).sum()).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let coeffs: Vec<f64> = e.iter().map(|v| v / total).collect();
    let out = (0..k).map(|i| (0..b).map(|j| coeffs[j] * m.at(&[i, j])).sum()).collect();
    (coeffs, out)
}

#[test]
fn lrsm_matches_matrix_oracle() {
    let (store, mem) = lrsm_setup(8, 4, 6, 7);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(rand_t(&[1, 3, 3, 8], 8));
    let (zc, zk) = lrsm_project(&mut tape, x, &mem).unwrap();
    let (coeffs, zl) = lrsm_aggregate(&mut tape, zk, &mem).unwrap();

    let xv = tape.value(x).data().to_vec();
    let pooled: Vec<f64> = (0..8).map(|c| (0..9).map(|p| xv[p * 8 + c]).sum::<f64>() / 9.0).collect();
    let down = store.get(mem.down.w);
    let zk_ref: Vec<f64> = (0..4).map(|j| (0..8).map(|c| pooled[c] * down.at(&[c, j])).sum()).collect();
    let (coeff_ref, zl_ref) = memory_oracle(&zk_ref, store.get(mem.bank));

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(tape.value(zc).data(), &pooled));
    assert!(close(tape.value(zk).data(), &zk_ref));
    assert!(close(coeffs.data(), &coeff_ref));
    assert!(close(tape.value(zl).data(), &zl_ref));
    assert!((coeffs.sum() - 1.0).abs() < 1e-6);
}

#[test]
fn degenerate_bank_returns_common_column() {
    let (mut store, mem) = lrsm_setup(8, 4, 5, 9);
    let v = [0.3, -1.2, 0.7, 2.0];
    store.set(mem.bank, Tensor::from_fn(&[4, 5], |i| v[i / 5])).unwrap();
    for seed in 0..4 {
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(rand_t(&[2, 3, 3, 8], 100 + seed));
        let (_, zk) = lrsm_project(&mut tape, x, &mem).unwrap();
        let (_, zl) = lrsm_aggregate(&mut tape, zk, &mem).unwrap();
        for row in tape.value(zl).data().chunks(4) {
            for (a, b) in row.iter().zip(v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lrsm_modulator_in_unit_interval_and_scales_channels() {
    let (mut store, mem) = lrsm_setup(6, 4, 8, 11);
    // large weights push the sigmoid toward its limits
    let up = store.get(mem.up.w).map(|v| v * 20.0);
    store.set(mem.up.w, up).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(rand_t(&[2, 4, 5, 6], 12));
    let s = lrsm_modulator(&mut tape, x, &mem).unwrap();
    assert_eq!(tape.shape(s), &[2, 1, 1, 6]);
    assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let y = lrsm_forward(&mut tape, x, &mem).unwrap();
    let q = mem.q.forward(&mut tape, x).unwrap();
    let (qv, sv, yv) = (tape.value(q), tape.value(s), tape.value(y));
    for i in 0..yv.len() {
        let (n, c) = (i / (4 * 5 * 6), i % 6);
        assert_eq!(yv.data()[i], qv.data()[i] * sv.data()[n * 6 + c]);
    }
}

#[test]
fn lrsm_gradients_match_finite_differences() {
    let (store, mem) = lrsm_setup(6, 4, 5, 13);
    let inputs = block_inputs(&store, rand_t(&[2, 3, 3, 6], 14));
    let checked: Vec<usize> = (0..inputs.len()).collect();
    let opts = GradCheckOptions { points: 8, ..GradCheckOptions::default() };
    let r = check("lrsm", &inputs, &checked, opts, |t, _| {
        let x = t.leaf_var(inputs.len() - 1);
        lrsm_forward(t, x, &mem)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn ssmb_preserves_shape_and_gradients() {
    let mut store = ParamStore::new();
    let cfg = SsmbConfig {
        lrsm: LrsmConfig { rank: Some(2), bank: 4 },
        ..SsmbConfig::default()
    };
    let p = SsmbParams::init(&mut Init::new(&mut store, 15), "ssmb", &cfg, 4).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(rand_t(&[1, 5, 5, 4], 16));
    let y = ssmb_forward(&mut tape, x, &p).unwrap();
    assert_eq!(tape.shape(y), &[1, 5, 5, 4]);

    let inputs = block_inputs(&store, rand_t(&[1, 5, 5, 4], 17));
    let checked: Vec<usize> = (0..inputs.len()).collect();
    let r = check("ssmb", &inputs, &checked, GradCheckOptions::default(), |t, _| {
        let x = t.leaf_var(inputs.len() - 1);
        ssmb_forward(t, x, &p)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn ssmb_with_zero_weights_is_identity() {
    let mut store = ParamStore::new();
    let p = SsmbParams::init(&mut Init::new(&mut store, 18), "ssmb", &SsmbConfig::default(), 8).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(rand_t(&[1, 4, 4, 8], 19));
    let y = ssmb_forward(&mut tape, x, &p).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

fn attention_setup(c: usize) -> (ParamStore<f64>, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut Init::new(&mut store, 40), "attn", c).unwrap();
    (store, p)
}

#[test]
fn attention_single_token_returns_value() {
    let (store, p) = attention_setup(5);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(rand_t(&[1, 1, 5], 41));
    let y = naive_self_attention(&mut tape, x, &p).unwrap();
    let v = p.v.forward(&mut tape, x).unwrap();
    let want = p.out.forward(&mut tape, v).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(want).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_uniform_tokens_return_common_value() {
    let (store, p) = attention_setup(4);
    let token = rand_t(&[4], 42);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::from_fn(&[3, 3, 4], |i| token.data()[i % 4]));
    let y = naive_self_attention(&mut tape, x, &p).unwrap();
    let one = tape.constant(token.clone().reshape(&[1, 4]).unwrap());
    let v = p.v.forward(&mut tape, one).unwrap();
    let want = p.out.forward(&mut tape, v).unwrap();
    let w = tape.value(want).data().to_vec();
    for row in tape.value(y).data().chunks(4) {
        for (a, b) in row.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn counted_macs(hw: usize, c: usize, attention: bool) -> u64 {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 50);
    let fsm = FsmParams::init(&mut init, "fsm", &FsmConfig::default(), c).unwrap();
    let attn = AttentionParams::init(&mut init, "attn", c).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::zeros(&[1, hw, hw, c]));
    let before = tape.macs();
    if attention {
        naive_self_attention(&mut tape, x, &attn).unwrap();
    } else {
        fsm_forward(&mut tape, x, &fsm).unwrap();
    }
    tape.macs() - before
}

#[test]
fn focal_cost_is_linear_and_attention_quadratic_in_tokens() {
    let fsm = counted_macs(64, 16, false) as f64 / counted_macs(32, 16, false) as f64;
    let attn = counted_macs(64, 16, true) as f64 / counted_macs(32, 16, true) as f64;
    assert!((fsm - 4.0).abs() <= 0.4, "fsm ratio {fsm}");
    assert!((attn - 16.0).abs() <= 1.6, "attention ratio {attn}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bank_permutation_is_exactly_invariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let (mut store, mem) = lrsm_setup(8, 4, 7, seed);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(rand_t(&[2, 3, 3, 8], seed + 1));
        let (_, zk) = lrsm_project(&mut tape, x, &mem).unwrap();
        let (c0, zl) = lrsm_aggregate(&mut tape, zk, &mem).unwrap();
        let before = tape.value(zl).clone();

        let mut order: Vec<usize> = (0..7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..7).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let bank = store.get(mem.bank).clone();
        store.set(mem.bank, Tensor::from_fn(&[4, 7], |i| bank.at(&[i / 7, order[i % 7]]))).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(rand_t(&[2, 3, 3, 8], seed + 1));
        let (_, zk) = lrsm_project(&mut tape, x, &mem).unwrap();
        let (c1, zl) = lrsm_aggregate(&mut tape, zk, &mem).unwrap();
        prop_assert_eq!(tape.value(zl), &before);
        for row in 0..2 {
            for j in 0..7 {
                prop_assert_eq!(c1.at(&[row, j]), c0.at(&[row, order[j]]));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..30.0) {
        let (mut store, mem) = lrsm_setup(6, 3, 9, seed);
        let bank = store.get(mem.bank).map(|v| v * scale);
        store.set(mem.bank, bank).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(rand_t(&[3, 2, 2, 6], seed).map(|v| v * scale));
        let (_, zk) = lrsm_project(&mut tape, x, &mem).unwrap();
        let (coeffs, _) = lrsm_aggregate(&mut tape, zk, &mem).unwrap();
        for row in coeffs.data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
