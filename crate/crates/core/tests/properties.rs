use missformer::checkpoint;
use missformer::corrupt::{self, CorruptionConfig, InputMode, ObservedSequence};
use missformer::eval::{self, EvalReport, EvalTask};
use missformer::ingest::{self, RawRecord, WindowOptions};
use missformer::model::{self, ForwardOptions, MissFormer, ModelConfig};
use missformer::rng;
use missformer::tensor::{Tape, Tensor, Var};
use missformer::training::{self, Task, TrainConfig};
use missformer::trajgen::{self, GeneratorConfig, Point, Trajectory};
use proptest::prelude::*;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Checks the tape gradient of `sum(w * f(inputs))` against central
/// differences, for every input.
fn check_grad(
    inputs: &[(Vec<usize>, Vec<f64>)],
    weights: &[f64],
    f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>,
) -> Result<(), TestCaseError> {
    let eval = |xs: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(xs)
            .map(|((s, _), x)| tape.constant(tensor(s, x)))
            .collect();
        let y = f(&vars);
        y.data().iter().zip(weights.iter().cycle()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, x)| tape.param(&tensor(s, x))).collect();
    let y = f(&vars);
    let n = y.data().len();
    let w: Vec<f64> = weights.iter().cycle().take(n).copied().collect();
    let loss = y.mul(&tape.constant(tensor(&y.shape(), &w))).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, x)| x.clone()).collect();
    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| vec![0.0; inputs[i].1.len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut xs = base.clone();
            xs[i][j] += FD_STEP;
            let up = eval(&xs);
            xs[i][j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-6);
        prop_assert!(
            diff / scale < FD_TOL,
            "input {i}: relative error {} (analytic {:?}, numeric {:?})",
            diff / scale,
            analytic,
            numeric
        );
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grad_matmul(a in vals(12), b in vals(12), w in vals(9)) {
        check_grad(&[(vec![3, 4], a), (vec![4, 3], b)], &w, |v| v[0].matmul(&v[1]).unwrap())?;
    }

    #[test]
    fn grad_batched_matmul(a in vals(16), b in vals(16), w in vals(8)) {
        check_grad(&[(vec![2, 2, 4], a), (vec![2, 4, 2], b)], &w, |v| v[0].matmul(&v[1]).unwrap())?;
    }

    #[test]
    fn grad_elementwise(a in vals(6), b in vals(6), bias in vals(3), w in vals(6)) {
        let ins = [(vec![2, 3], a), (vec![2, 3], b), (vec![3], bias)];
        check_grad(&ins, &w, |v| v[0].add(&v[2]).unwrap())?;
        check_grad(&ins, &w, |v| v[0].sub(&v[1]).unwrap())?;
        check_grad(&ins, &w, |v| v[0].mul(&v[1]).unwrap().mul(&v[2]).unwrap())?;
        check_grad(&ins, &w, |v| v[0].scale(-1.7).unwrap())?;
    }

    #[test]
    fn grad_shape_ops(a in vals(12), b in vals(6), w in vals(18)) {
        let ins = [(vec![3, 4], a), (vec![3, 2], b)];
        check_grad(&ins, &w, |v| v[0].transpose().unwrap())?;
        check_grad(&ins, &w, |v| v[0].reshape(&[2, 6]).unwrap())?;
        check_grad(&ins, &w, |v| Var::concat_last(&[v[0].clone(), v[1].clone()]).unwrap())?;
        check_grad(&ins, &w, |v| v[0].slice_last(1, 2).unwrap())?;
    }

    #[test]
    fn grad_reductions(a in vals(12), w in vals(1)) {
        let ins = [(vec![3, 4], a)];
        check_grad(&ins, &w, |v| v[0].sum().unwrap())?;
        check_grad(&ins, &w, |v| v[0].mean().unwrap())?;
    }

    #[test]
    fn grad_relu(a in prop::collection::vec((-2.0..2.0f64).prop_filter("away from kink", |x| x.abs() > 1e-3), 8), w in vals(8)) {
        check_grad(&[(vec![2, 4], a)], &w, |v| v[0].relu().unwrap())?;
    }

    #[test]
    fn grad_softmax(a in vals(12), w in vals(12)) {
        let ins = [(vec![3, 4], a)];
        check_grad(&ins, &w, |v| v[0].softmax(1).unwrap())?;
        check_grad(&ins, &w, |v| v[0].softmax(0).unwrap())?;
    }

    #[test]
    fn grad_layer_norm(a in vals(12), g in vals(4), b in vals(4), w in vals(12)) {
        let ins = [(vec![3, 4], a), (vec![4], g), (vec![4], b)];
        check_grad(&ins, &w, |v| v[0].layer_norm(&v[1], &v[2], 1e-5).unwrap())?;
    }

    #[test]
    fn grad_attention(q in vals(8), k in vals(12), v in vals(12), w in vals(6)) {
        let ins = [(vec![4, 2], q), (vec![6, 2], k), (vec![6, 2], v)];
        check_grad(&ins, &w, |x| model::attention(&x[0], &x[1], &x[2]).unwrap().0)?;
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), mag in 0.0..1e6f64) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-mag..=mag)).collect();
        let tape = Tape::new();
        let s = tape.constant(tensor(&[rows, cols], &data)).softmax(1).unwrap().data();
        for row in s.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn matmul_is_associative(a in vals(16), b in vals(16), c in vals(16)) {
        let tape = Tape::new();
        let (a, b, c) = (
            tape.constant(tensor(&[4, 4], &a)),
            tape.constant(tensor(&[4, 4], &b)),
            tape.constant(tensor(&[4, 4], &c)),
        );
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap().data();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap().data();
        for (l, r) in left.iter().zip(&right) {
            prop_assert!((l - r).abs() <= 1e-9);
        }
    }

    #[test]
    fn matmul_matches_loop_oracle(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let a: Vec<f64> = (0..m * k).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.random_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let got = tape.constant(tensor(&[m, k], &a)).matmul(&tape.constant(tensor(&[k, n], &b))).unwrap().data();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                prop_assert!((got[i * n + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn finite_inputs_stay_finite(data in prop::collection::vec(-1e150..1e150f64, 8), constant_row in any::<bool>()) {
        let data = if constant_row { vec![data[0]; 8] } else { data };
        let tape = Tape::new();
        let x = tape.constant(tensor(&[2, 4], &data));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        prop_assert!(x.softmax(1).unwrap().data().iter().all(|v| v.is_finite()));
        prop_assert!(x.layer_norm(&g, &b, 1e-5).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tensor_shape_must_match_data(shape in prop::collection::vec(0usize..4, 0..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.5; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(shape, vec![0.5; n + extra]).is_err());
        }
    }
}

fn object_cfg(seed: u64) -> GeneratorConfig {
    GeneratorConfig::object().with_seed(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_seeded(seed in any::<u64>(), n in 1usize..20) {
        let a = trajgen::generate(&object_cfg(seed), n).unwrap();
        let b = trajgen::generate(&object_cfg(seed), n).unwrap();
        prop_assert_eq!(&a, &b);
        // prefix-stable in n
        let c = trajgen::generate(&object_cfg(seed), n + 3).unwrap();
        prop_assert_eq!(&a[..], &c[..n]);
    }

    #[test]
    fn generated_motion_respects_bounds(seed in any::<u64>(), pedestrian in any::<bool>()) {
        let cfg = if pedestrian { GeneratorConfig::pedestrian() } else { GeneratorConfig::object() }.with_seed(seed);
        let (lo, hi) = cfg.length_range;
        let amax = cfg.accel.lo.abs().max(cfg.accel.hi.abs());
        let dt = cfg.dt();
        for t in trajgen::generate(&cfg, 10).unwrap() {
            prop_assert!((lo..=hi).contains(&t.len()));
            prop_assert!(t.positions.iter().flatten().all(|v| v.is_finite()));
            prop_assert_eq!(t.dt, dt);
            let speeds: Vec<f64> = t
                .positions
                .windows(2)
                .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt() / dt)
                .collect();
            for s in speeds.windows(2) {
                prop_assert!((s[1] - s[0]).abs() <= amax * dt + 1e-9, "speed jump {} -> {}", s[0], s[1]);
            }
            if let trajgen::SpeedDist::Uniform(u) = cfg.speed {
                prop_assert!(speeds[0] <= u.hi + amax * dt + 1e-9);
            }
        }
    }

    #[test]
    fn corruption_is_seeded_and_zeroes_missing(seed in any::<u64>(), noise in 0.0..3.0f64, p in 0.0..1.0f64) {
        let traj = trajgen::generate_one(&object_cfg(seed), 0);
        let cfg = CorruptionConfig::new(noise, p).with_seed(seed);
        let a = corrupt::corrupt(&traj, &cfg).unwrap();
        prop_assert_eq!(&a, &corrupt::corrupt(&traj, &cfg).unwrap());
        prop_assert_eq!(a.len(), traj.len());
        prop_assert!(!a.missing[0]);
        for (v, &m) in a.values.iter().zip(&a.missing) {
            if m {
                prop_assert_eq!(*v, [0.0, 0.0]);
            }
        }
        if noise == 0.0 {
            for ((v, &m), t) in a.values.iter().zip(&a.missing).zip(&traj.positions) {
                if !m {
                    prop_assert_eq!(v, t);
                }
            }
        }
    }

    #[test]
    fn hidden_truth_never_leaks(seed in any::<u64>(), noise in 0.0..2.0f64, p in 0.05..0.9f64, shift in -50.0..50.0f64) {
        let traj = trajgen::generate_one(&object_cfg(seed), 1);
        let cfg = CorruptionConfig::new(noise, p).with_seed(seed);
        let a = corrupt::corrupt(&traj, &cfg).unwrap();
        let mut other = traj.clone();
        for (pos, &m) in other.positions.iter_mut().zip(&a.missing) {
            if m {
                *pos = [pos[0] + shift, pos[1] - shift];
            }
        }
        let b = corrupt::corrupt(&other, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn offsets_integrate_back(seed in any::<u64>()) {
        let traj = trajgen::generate_one(&object_cfg(seed), 2);
        let obs = ObservedSequence::exact(&traj);
        let off = corrupt::to_offsets(&obs).unwrap();
        prop_assert_eq!(off.mode, InputMode::Offsets);
        prop_assert!(corrupt::to_offsets(&off).is_err());
        let mut acc = traj.positions[0];
        for (i, d) in off.values.iter().enumerate().skip(1) {
            acc = [acc[0] + d[0], acc[1] + d[1]];
            prop_assert!((acc[0] - traj.positions[i][0]).abs() < 1e-9);
            prop_assert!((acc[1] - traj.positions[i][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn offset_missing_flags(missing in prop::collection::vec(any::<bool>(), 2..20)) {
        let values: Vec<Point> = (0..missing.len()).map(|i| [i as f64, 0.5 * i as f64]).collect();
        let obs = ObservedSequence::new(values, missing.clone(), InputMode::Positions).unwrap();
        let off = corrupt::to_offsets(&obs).unwrap();
        prop_assert_eq!(off.missing[0], missing[0]);
        for i in 1..missing.len() {
            prop_assert_eq!(off.missing[i], missing[i] || missing[i - 1]);
        }
    }

    #[test]
    fn tail_mask_hides_exactly_the_tail(seed in any::<u64>(), n_pred in 0usize..8) {
        let traj = trajgen::generate_one(&object_cfg(seed), 3);
        let obs = corrupt::corrupt(&traj, &CorruptionConfig::new(0.5, 0.2).with_seed(seed)).unwrap();
        let masked = corrupt::mask_tail_for_prediction(&obs, n_pred).unwrap();
        let k = obs.len();
        for i in 0..k {
            if i >= k - n_pred {
                prop_assert!(masked.missing[i]);
                prop_assert_eq!(masked.values[i], [0.0, 0.0]);
            } else {
                prop_assert_eq!(masked.missing[i], obs.missing[i]);
                prop_assert_eq!(masked.values[i], obs.values[i]);
            }
        }
    }

    #[test]
    fn corpus_and_observed_files_round_trip(seed in any::<u64>(), n in 1usize..6) {
        let corpus = trajgen::generate(&object_cfg(seed), n).unwrap();
        let mut buf = Vec::new();
        trajgen::write_corpus(&mut buf, &corpus).unwrap();
        prop_assert_eq!(&trajgen::read_corpus(&buf[..]).unwrap(), &corpus);

        let cfg = CorruptionConfig::new(1.0, 0.3).with_seed(seed);
        let obs: Vec<ObservedSequence> = corpus.iter().map(|t| corrupt::corrupt(t, &cfg).unwrap()).collect();
        let mut buf = Vec::new();
        corrupt::write_observed(&mut buf, &obs).unwrap();
        prop_assert_eq!(corrupt::read_observed(&buf[..]).unwrap(), obs);
    }
}

fn small_model(seed: u64, heads: usize, layers: usize) -> MissFormer {
    let mut c = ModelConfig::new(8, heads, layers);
    c.seed = seed;
    c.input_scale = 20.0;
    c.output_scale = 20.0;
    MissFormer::new(c).unwrap()
}

fn random_obs(seed: u64, k: usize, p: f64) -> (Trajectory, ObservedSequence) {
    let traj = trajgen::generate_one(&object_cfg(seed).with_lengths(k, k), 0);
    let obs = corrupt::corrupt(&traj, &CorruptionConfig::new(0.3, p).with_seed(seed)).unwrap();
    (traj, obs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), k in 2usize..=20, heads in prop::sample::select(vec![1usize, 2, 4]), layers in 1usize..3) {
        let m = small_model(seed, heads, layers);
        let (_, obs) = random_obs(seed, k, 0.2);
        let (est, rec) = m.encoder_forward(&obs).unwrap();
        prop_assert_eq!(est.len(), k);
        prop_assert_eq!(rec.layers.len(), layers);
        for (_, _, map) in rec.maps() {
            prop_assert_eq!(map.k, k);
            prop_assert!(map.max_row_sum_error() <= 1e-9);
            for i in 0..k {
                prop_assert!(map.row(i).iter().all(|w| (0.0..=1.0).contains(w)));
            }
        }
    }

    #[test]
    fn output_ignores_masked_truth(seed in any::<u64>(), k in 3usize..=20, shift in -30.0..30.0f64) {
        let m = small_model(seed, 2, 2);
        let (traj, obs) = random_obs(seed, k, 0.4);
        let mut other = traj.clone();
        for (pos, &miss) in other.positions.iter_mut().zip(&obs.missing) {
            if miss {
                pos[0] += shift;
            }
        }
        let cfg = CorruptionConfig::new(0.3, 0.4).with_seed(seed);
        let obs2 = corrupt::corrupt(&other, &cfg).unwrap();
        let a = m.encoder_forward(&obs).unwrap().0;
        let b = m.encoder_forward(&obs2).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn swapping_steps_changes_output(seed in any::<u64>(), k in 4usize..=20, i in 0usize..20, j in 0usize..20) {
        let (i, j) = (i % k, j % k);
        prop_assume!(i != j);
        let m = small_model(seed, 1, 1);
        let (_, obs) = random_obs(seed, k, 0.0);
        prop_assume!(obs.values[i] != obs.values[j]);
        let mut swapped = obs.clone();
        swapped.values.swap(i, j);
        let a = m.encoder_forward(&obs).unwrap().0;
        let b = m.encoder_forward(&swapped).unwrap().0;
        prop_assert_ne!(a, b);
    }

    #[test]
    fn identity_attention_is_local(seed in any::<u64>(), k in 3usize..=20, other in 0usize..20, bump in 1.0..10.0f64) {
        let m = small_model(seed, 2, 2);
        let (_, obs) = random_obs(seed, k, 0.0);
        let other = other % k;
        let mut changed = obs.clone();
        changed.values[other][1] += bump;
        let opts = ForwardOptions { identity_attention: true };
        let a = m.encoder_forward_with(&obs, opts).unwrap().0;
        let b = m.encoder_forward_with(&changed, opts).unwrap().0;
        for t in 0..k {
            if t != other {
                prop_assert_eq!(a[t], b[t]);
            }
        }
        prop_assert_ne!(a[other], b[other]);
    }

    #[test]
    fn embedding_is_affine(seed in any::<u64>(), v in prop::array::uniform2(-5.0..5.0f64), row in 0usize..6) {
        let m = small_model(seed, 1, 1);
        let seq = |p: Point| {
            let mut values = vec![[1.0, -1.0]; 6];
            values[row] = p;
            m.embed(&ObservedSequence::new(values, vec![false; 6], InputMode::Positions).unwrap()).unwrap()
        };
        let (e0, e1, e2) = (seq([0.0, 0.0]), seq(v), seq([2.0 * v[0], 2.0 * v[1]]));
        let d = m.config().d_model;
        for c in 0..d {
            let idx = row * d + c;
            let lhs = e2.data()[idx] - e1.data()[idx];
            let rhs = e1.data()[idx] - e0.data()[idx];
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn prediction_covers_the_horizon(seed in any::<u64>(), obs_len in 2usize..=10, horizon in 0usize..=10) {
        let m = small_model(seed, 1, 1);
        let (_, obs) = random_obs(seed, obs_len, 0.0);
        let est = m.predict_full(&obs, horizon).unwrap();
        prop_assert_eq!(est.len(), obs_len + horizon);
        prop_assert!(m.predict_full(&obs, 21 - obs_len).is_err());
    }

    #[test]
    fn param_count_follows_config(d in prop::sample::select(vec![4usize, 8, 12]), heads in prop::sample::select(vec![1usize, 2, 4]), layers in 1usize..4, seed in any::<u64>()) {
        let mut c = ModelConfig::new(d, heads, layers);
        c.seed = seed;
        let m = MissFormer::new(c.clone()).unwrap();
        prop_assert_eq!(m.num_params(), model::param_count(&c));
        prop_assert!(m.params().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
        prop_assert_eq!(&m, &MissFormer::new(c).unwrap());
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2]), layers in 1usize..3, offsets in any::<bool>()) {
        let mut c = ModelConfig::new(8, heads, layers);
        c.seed = seed;
        c.input_scale = 3.25;
        c.output_scale = 0.5;
        if offsets {
            c.input_mode = InputMode::Offsets;
        }
        let m = MissFormer::new(c).unwrap();
        let mut meta = checkpoint::Meta::new();
        meta.insert("seed".into(), seed.to_string());
        let mut buf = Vec::new();
        checkpoint::write(&mut buf, &m, &meta).unwrap();
        let (back, meta2) = checkpoint::read(&buf[..]).unwrap();
        prop_assert_eq!(back, m);
        prop_assert_eq!(meta2, meta);
        prop_assert!(checkpoint::read(&buf[..buf.len() - 1]).is_err());
    }
}

fn ade_oracle(est: &[Point], truth: &[Point]) -> f64 {
    let mut total = 0.0;
    for i in 0..truth.len() {
        let dx = est[i][0] - truth[i][0];
        let dy = est[i][1] - truth[i][1];
        total += (dx * dx + dy * dy).sqrt();
    }
    total / truth.len() as f64
}

fn points(n: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform2(-100.0..100.0f64), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ade_matches_oracle(pairs in (1usize..25).prop_flat_map(|n| (points(n), points(n))), shift in prop::array::uniform2(-1e3..1e3f64)) {
        let (est, truth) = pairs;
        let n = truth.len();
        let a = eval::ade(&est, &truth, 0..n).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - ade_oracle(&est, &truth)).abs() <= 1e-12 * a.max(1.0));
        let f = eval::fde(&est, &truth).unwrap();
        prop_assert!(f >= 0.0);
        prop_assert!(f <= n as f64 * a + 1e-9);

        let mv = |p: &Vec<Point>| p.iter().map(|q| [q[0] + shift[0], q[1] + shift[1]]).collect::<Vec<_>>();
        let moved = eval::ade(&mv(&est), &mv(&truth), 0..n).unwrap();
        prop_assert!((moved - a).abs() <= 1e-9 * a.max(1.0));
        prop_assert_eq!(eval::ade(&truth, &truth, 0..n).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates_samples(samples in prop::collection::vec((0.0..10.0f64, 0.0..20.0f64), 1..50)) {
        let r = EvalReport::from_samples(Task::Filtering, samples.clone()).unwrap();
        let mean = samples.iter().map(|s| s.0).sum::<f64>() / samples.len() as f64;
        prop_assert!((r.ade - mean).abs() <= 1e-12);
        prop_assert!(r.ade >= 0.0 && r.fde >= 0.0 && r.ade_std >= 0.0);
        let (task, n, ade, std, fde) = EvalReport::parse_record_line(&r.record_line(), 1).unwrap();
        prop_assert_eq!((task, n), (r.task, r.n_samples));
        prop_assert_eq!((ade, std, fde), (r.ade, r.ade_std, r.fde));
    }

    #[test]
    fn linear_baseline_solves_normal_equations(
        pts in points(12),
        missing in prop::collection::vec(any::<bool>(), 12),
        horizon in 0usize..6,
    ) {
        let mut missing = missing;
        missing[0] = false;
        missing[11] = false;
        let obs = ObservedSequence::new(pts.clone(), missing.clone(), InputMode::Positions).unwrap();
        let fit = eval::linear_baseline(&obs, horizon).unwrap();
        prop_assert_eq!(fit.len(), 12 + horizon);

        // explicit 2x2 normal equations over the observed steps
        let obs_idx: Vec<usize> = (0..12).filter(|&i| !missing[i]).collect();
        let n = obs_idx.len() as f64;
        let st: f64 = obs_idx.iter().map(|&i| i as f64).sum();
        let stt: f64 = obs_idx.iter().map(|&i| (i * i) as f64).sum();
        let det = n * stt - st * st;
        for c in 0..2 {
            let sy: f64 = obs_idx.iter().map(|&i| pts[i][c]).sum();
            let sty: f64 = obs_idx.iter().map(|&i| i as f64 * pts[i][c]).sum();
            let slope = (n * sty - st * sy) / det;
            let icpt = (sy - slope * st) / n;
            for (t, p) in fit.iter().enumerate() {
                let want = icpt + slope * t as f64;
                prop_assert!((p[c] - want).abs() <= 1e-10 * want.abs().max(1.0), "t={t} got {} want {want}", p[c]);
            }
        }
    }

    #[test]
    fn windows_are_contiguous_runs(
        agents in prop::collection::vec((1usize..40, -5.0..5.0f64), 1..5),
        stride in 1usize..4,
    ) {
        let mut records = Vec::new();
        for (a, &(len, vx)) in agents.iter().enumerate() {
            for f in 0..len {
                records.push(RawRecord { frame: 10 * f as i64, agent: a as i64, x: vx * f as f64, y: a as f64 });
            }
        }
        let opts = WindowOptions { obs_len: 8, pred_len: 12, stride, ..WindowOptions::default() };
        let set = ingest::windows(&records, &opts, "synthetic").unwrap();
        let expected: usize = agents.iter().map(|&(len, _)| if len >= 20 { (len - 20) / stride + 1 } else { 0 }).sum();
        prop_assert_eq!(set.windows.len(), expected);
        for w in &set.windows {
            prop_assert_eq!(w.len(), 20);
            let step = w.positions[1][0] - w.positions[0][0];
            for p in w.positions.windows(2) {
                prop_assert!((p[1][0] - p[0][0] - step).abs() < 1e-9);
                prop_assert_eq!(p[1][1], p[0][1]);
            }
        }

        let mut buf = Vec::new();
        ingest::write_records(&mut buf, &records).unwrap();
        prop_assert_eq!(ingest::parse_reader(&buf[..], false).unwrap(), records);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn training_is_reproducible(seed in any::<u64>(), task in prop::sample::select(vec![Task::Reconstruction, Task::Filtering, Task::Prediction])) {
        let corpus = trajgen::generate(&object_cfg(seed).with_lengths(6, 10), 12).unwrap();
        let ccfg = CorruptionConfig::new(0.5, 0.1).with_seed(seed);
        let tcfg = TrainConfig { epochs: 3, batch_size: 4, task, seed, ..TrainConfig::default() };
        let mut a = small_model(seed, 1, 1);
        let mut b = small_model(seed, 1, 1);
        let ra = training::train(&mut a, &corpus, &ccfg, &tcfg).unwrap();
        let rb = training::train(&mut b, &corpus, &ccfg, &tcfg).unwrap();
        prop_assert_eq!(ra.losses.len(), 3);
        prop_assert!(ra.losses.iter().all(|l| l.is_finite()));
        prop_assert_eq!(&ra.losses, &rb.losses);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.params().iter().all(|t| t.data().iter().all(|v| v.is_finite())));

        let et = EvalTask::new(task);
        let ea = eval::evaluate(&a, &corpus, &ccfg, &et).unwrap();
        prop_assert_eq!(ea, eval::evaluate(&b, &corpus, &ccfg, &et).unwrap());
    }
}
