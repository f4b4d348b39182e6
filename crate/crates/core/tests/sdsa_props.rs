use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedrive::profiler::firing_rate;
use spikedrive::sdsa::{sdsa_v1_counted, sdsa_v2_counted};
use spikedrive::{sdsa_addition_count, sdsa_per_channel, sdsa_v1, sdsa_v2, AttentionInputs, LifParams, SpikeTensor};

fn bits(dims: (usize, usize, usize)) -> impl Strategy<Value = SpikeTensor> {
    prop::collection::vec(0u8..=1, dims.0 * dims.1 * dims.2)
        .prop_map(move |v| SpikeTensor::from_shape_vec(dims, v).unwrap())
}

/// `(T, N, D, H)` with `H | D`.
fn shape() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..4, 1usize..7, prop::sample::select(vec![1usize, 2, 4, 8]))
        .prop_flat_map(|(t, n, d)| {
            let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
            (Just(t), Just(n), Just(d), prop::sample::select(divisors))
        })
}

fn inputs() -> impl Strategy<Value = AttentionInputs> {
    shape().prop_flat_map(|(t, n, d, h)| {
        (bits((t, n, d)), bits((t, n, d)), bits((t, n, d)))
            .prop_map(move |(q, k, v)| AttentionInputs::new(q, k, v, h).unwrap())
    })
}

fn random_inputs(rng: &mut ChaCha8Rng, t: usize, n: usize, d: usize, rate: f64) -> AttentionInputs {
    let mut draw = || {
        SpikeTensor::new(Array3::from_shape_simple_fn((t, n, d), || u8::from(rng.random_bool(rate)))).unwrap()
    };
    let (q, k, v) = (draw(), draw(), draw());
    AttentionInputs::new(q, k, v, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn outputs_binary_and_masks_shrink(x in inputs(), u_th in prop::sample::select(vec![0.5f64, 1.0, 2.0])) {
        let lif = LifParams { u_th, ..LifParams::default() };
        let v1 = sdsa_v1(&x, &lif).unwrap();
        let v2 = sdsa_v2(&x, &lif).unwrap();
        prop_assert!(v1.data().iter().chain(v2.data().iter()).all(|&b| b <= 1));
        prop_assert!(firing_rate(&v1).unwrap() <= firing_rate(&x.v_s).unwrap());
        prop_assert!(firing_rate(&v2).unwrap() <= firing_rate(&x.q_s).unwrap());
    }

    #[test]
    fn v1_channels_are_zero_or_value(x in inputs()) {
        let lif = LifParams::default();
        let out = sdsa_v1(&x, &lif).unwrap();
        let (t, n, d) = x.dims();
        for ti in 0..t {
            for c in 0..d {
                let zero = (0..n).all(|i| out.data()[[ti, i, c]] == 0);
                let copy = (0..n).all(|i| out.data()[[ti, i, c]] == x.v_s.data()[[ti, i, c]]);
                prop_assert!(zero || copy, "t={} c={}", ti, c);
            }
        }
    }

    #[test]
    fn per_channel_equals_v2_at_full_heads(x in inputs()) {
        let d = x.dims().2;
        let full = AttentionInputs::new(x.q_s.clone(), x.k_s.clone(), x.v_s.clone(), d).unwrap();
        let lif = LifParams::default();
        prop_assert_eq!(sdsa_per_channel(&full, &lif).unwrap(), sdsa_v2(&full, &lif).unwrap());
    }

    #[test]
    fn only_additions_are_counted(x in inputs()) {
        let lif = LifParams::default();
        let c1 = sdsa_v1_counted(&x, &lif).unwrap().counts;
        let c2 = sdsa_v2_counted(&x, &lif).unwrap().counts;
        prop_assert_eq!(c1.multiplications, 0);
        prop_assert_eq!(c2.multiplications, 0);
        prop_assert_eq!(c1.additions, sdsa_addition_count(&x));
    }

    #[test]
    fn heads_do_not_change_outputs(x in inputs()) {
        let one = AttentionInputs::new(x.q_s.clone(), x.k_s.clone(), x.v_s.clone(), 1).unwrap();
        let lif = LifParams::default();
        prop_assert_eq!(sdsa_v1(&x, &lif).unwrap(), sdsa_v1(&one, &lif).unwrap());
        prop_assert_eq!(sdsa_v2(&x, &lif).unwrap(), sdsa_v2(&one, &lif).unwrap());
    }
}

#[test]
fn addition_count_matches_independence_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, n, d, rq, rk) = (4, 32, 16, 0.3, 0.6);
    let trials = 100;
    let mut total = 0u64;
    for _ in 0..trials {
        let draw = |rng: &mut ChaCha8Rng, r: f64| {
            SpikeTensor::new(Array3::from_shape_simple_fn((t, n, d), || u8::from(rng.random_bool(r)))).unwrap()
        };
        let q = draw(&mut rng, rq);
        let k = draw(&mut rng, rk);
        let v = draw(&mut rng, 0.5);
        total += sdsa_addition_count(&AttentionInputs::new(q, k, v, 1).unwrap());
    }
    let mean = total as f64 / trials as f64;
    let expected = rq * rk * (n * d * t) as f64;
    assert!((mean - expected).abs() / expected < 0.1, "mean {mean} expected {expected}");
}

fn doubling_slope(counts: &[f64]) -> f64 {
    // Least squares slope of log2(count) against the doubling index.
    let xs: Vec<f64> = (0..counts.len()).map(|i| i as f64).collect();
    let ys: Vec<f64> = counts.iter().map(|c| c.log2()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[test]
fn v2_additions_linear_in_tokens_and_channels() {
    let lif = LifParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let by_n: Vec<f64> = [16, 32, 64, 128, 256]
        .iter()
        .map(|&n| sdsa_v2_counted(&random_inputs(&mut rng, 4, n, 64, 0.3), &lif).unwrap().counts.additions as f64)
        .collect();
    let by_d: Vec<f64> = [16, 32, 64, 128, 256]
        .iter()
        .map(|&d| sdsa_v2_counted(&random_inputs(&mut rng, 4, 64, d, 0.3), &lif).unwrap().counts.additions as f64)
        .collect();
    let (sn, sd) = (doubling_slope(&by_n), doubling_slope(&by_d));
    assert!((sn - 1.0).abs() <= 0.1, "slope in N {sn}: {by_n:?}");
    assert!((sd - 1.0).abs() <= 0.1, "slope in D {sd}: {by_d:?}");
}
