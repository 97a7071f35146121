use combogait::data::{generate_dataset, Dataset, GenerateOptions, MANIFEST_FILE};
use combogait::numerics::nn::{Ctx, ParamStore};
use combogait::numerics::{Mode, Tape, Tensor, Var};
use combogait::oracle::micro_batch;
use combogait::training::{
    batch_all_triplet, batch_loss, checkpoint_bytes, combo_loss, cross_entropy, gait_ce, parse_checkpoint,
    valid_triplets, write_loss_trace, Sgd, Trainer, TRACE_HEADER,
};
use combogait::{ComboGait, Config, Error, LossWeights, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn triplet(f: &Tensor<f64>, ids: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let l = batch_all_triplet(&mut tape, v, ids, 0.2).unwrap();
    scalar(&tape, l)
}

/// Exhaustive enumeration over parts and (a, p, n).
fn triplet_oracle(f: &Tensor<f64>, ids: &[usize], margin: f64) -> f64 {
    let s = f.shape();
    let (b, c, parts) = (s[0], s[1], s[2]);
    let dist = |i: usize, j: usize, p: usize| (0..c).map(|k| (f.at(&[i, k, p]) - f.at(&[j, k, p])).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for p in 0..parts {
        let (mut sum, mut active) = (0.0, 0);
        for a in 0..b {
            for q in 0..b {
                for n in 0..b {
                    if a != q && ids[a] == ids[q] && ids[n] != ids[a] {
                        let h = dist(a, q, p) - dist(a, n, p) + margin;
                        if h > 0.0 {
                            sum += h;
                            active += 1;
                        }
                    }
                }
            }
        }
        if active > 0 {
            total += sum / active as f64;
        }
    }
    total / parts as f64
}

#[test]
fn triplet_examples() {
    let f = Tensor::new(&[3, 1, 1], vec![0.0, 0.0, 10.0]).unwrap();
    assert_eq!(triplet(&f, &[0, 0, 1]), 0.0);
    let f = Tensor::new(&[3, 1, 1], vec![0.0, 1.0, -0.5]).unwrap();
    assert!((triplet(&f, &[0, 0, 1]) - 0.7).abs() < 1e-12);
    assert_eq!(valid_triplets(&[0, 0, 1]), vec![(0, 1, 2), (1, 0, 2)]);
    assert!(valid_triplets(&[0, 1, 2]).is_empty());
    assert_eq!(triplet(&f, &[0, 1, 2]), 0.0);
}

#[test]
fn triplet_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for ids in [[0, 0, 1, 1], [0, 1, 0, 1], [0, 0, 0, 1]] {
        let f = rand_tensor(&[4, 3, 2], &mut rng);
        assert!((triplet(&f, &ids) - triplet_oracle(&f, &ids, 0.2)).abs() < 1e-6);
    }
}

fn ce(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = cross_entropy(&mut tape, l, labels).unwrap();
    scalar(&tape, v)
}

fn log_softmax_oracle(row: &[f64], k: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row[k] - z.ln()
}

#[test]
fn gait_ce_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[2, 3, 7]));
    let l = gait_ce(&mut tape, uniform, &[0, 4, 6]).unwrap();
    assert!((scalar(&tape, l) - 7f64.ln()).abs() < 1e-12);

    let sharp = tape.constant(Tensor::from_fn(&[1, 2, 3], |i| if i % 3 == i / 3 { 1e4 } else { 0.0 }));
    let l = gait_ce(&mut tape, sharp, &[0, 1]).unwrap();
    assert!(scalar(&tape, l) < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 5], &mut rng).data().iter().map(|v| v * 4.0).collect::<Vec<_>>();
    let ids = [4, 0, 2];
    let v = tape.constant(Tensor::new(&[2, 3, 5], x.clone()).unwrap());
    let l = gait_ce(&mut tape, v, &ids).unwrap();
    let mut expect = 0.0;
    for p in 0..2 {
        for (b, &id) in ids.iter().enumerate() {
            expect -= log_softmax_oracle(&x[(p * 3 + b) * 5..(p * 3 + b + 1) * 5], id);
        }
    }
    assert!((scalar(&tape, l) - expect / 6.0).abs() < 1e-6);

    let bad = tape.constant(Tensor::zeros(&[1, 3, 5]));
    assert!(matches!(gait_ce(&mut tape, bad, &[0, 1, 5]), Err(Error::Label(_))));
}

#[test]
fn attribute_ce_examples() {
    let labels = [1, 0, 3];
    let got: Vec<f64> = [5, 2, 4].iter().map(|&n| ce(&Tensor::zeros(&[3, n]), &labels.map(|l| l % n))).collect();
    for (g, n) in got.iter().zip([5f64, 2.0, 4.0]) {
        assert!((g - n.ln()).abs() < 1e-12);
    }
    let dominant = Tensor::from_fn(&[3, 5], |i| if i % 5 == labels[i / 5] { 8.0 } else { 0.0 });
    assert!(ce(&dominant, &labels) < 0.01);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[6, 4], &mut rng);
    let y = [0, 3, 2, 2, 1, 0];
    let expect = -(0..6).map(|r| log_softmax_oracle(&x.data()[r * 4..(r + 1) * 4], y[r])).sum::<f64>() / 6.0;
    assert!((ce(&x, &y) - expect).abs() < 1e-6);
}

fn combo(w: LossWeights, terms: [f64; 5]) -> f64 {
    let mut tape = Tape::new();
    let vs = terms.map(|t| tape.constant(Tensor::scalar(t)));
    let l = combo_loss(&mut tape, vs, &w).unwrap();
    scalar(&tape, l.total)
}

#[test]
fn combo_loss_examples() {
    let terms = [0.5, 2.0, 1.6, 0.7, 1.4];
    assert_eq!(combo(LossWeights::with_beta(0.0), terms), 2.5);
    let zero = LossWeights { alpha_triplet: 0.0, alpha_ce: 0.0, ..LossWeights::with_beta(0.0) };
    assert_eq!(combo(zero, terms), 0.0);
    assert!((combo(LossWeights::default(), terms) - 2.537).abs() < 1e-12);
}

#[test]
fn sgd_examples() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    store.get_mut(id).grad = vec![0.5, 1.0];
    Sgd::new(0.1, 0.0, 0.0).step(&mut store);
    assert_eq!(store.get(id).value.data(), &[0.95, -2.1]);

    store.get_mut(id).value = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    store.get_mut(id).grad = vec![0.0, 0.0];
    let mut opt = Sgd::new(0.1, 0.0, 0.5);
    opt.step(&mut store);
    assert_eq!(store.get(id).value.data(), &[0.95, -1.9]);

    // Two heavy-ball steps on f(x) = x² from x = 1.
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::scalar(1.0));
    let mut opt = Sgd::new(0.1, 0.9, 0.0);
    let mut xs = Vec::new();
    for _ in 0..2 {
        let x = store.get(id).value.data()[0];
        store.get_mut(id).grad = vec![2.0 * x];
        opt.step(&mut store);
        xs.push(store.get(id).value.data()[0]);
    }
    assert!((xs[0] - 0.8).abs() < 1e-12);
    assert!((xs[1] - 0.46).abs() < 1e-12);
}

fn tiny_dataset(dir: &std::path::Path) -> Dataset {
    let opts = GenerateOptions { subjects: 3, seqs_per_subject: 2, frames: 8, ..GenerateOptions::default() };
    generate_dataset(&opts, dir).unwrap();
    Dataset::load(&dir.join(MANIFEST_FILE), |_| true).unwrap()
}

fn tiny_config(iterations: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.channels = vec![4, 4, 4];
    cfg.model.smpl_hidden = vec![16, 16];
    cfg.model.token_dim = 16;
    cfg.model.part_dim = 8;
    cfg.model.direct_hidden = 8;
    cfg.train.iterations = iterations;
    cfg.train.subjects_per_batch = 2;
    cfg.train.seqs_per_subject = 2;
    cfg.train.frames = 4;
    cfg
}

#[test]
fn zero_iterations_leave_the_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let cfg = tiny_config(0);
    let mut trainer = Trainer::new(cfg.clone(), 3).unwrap();
    let fresh = Trainer::new(cfg, 3).unwrap();
    assert!(trainer.run(&ds, None).unwrap().is_empty());
    for (a, b) in trainer.model.store.iter().zip(fresh.model.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let run = || {
        let mut t = Trainer::new(tiny_config(4), 3).unwrap();
        let trace = t.run(&ds, None).unwrap();
        (trace, checkpoint_bytes(&t.config, &t.model))
    };
    let (ta, ca) = run();
    let (tb, cb) = run();
    assert_eq!(ta.len(), 4);
    assert_eq!(ta, tb);
    assert_eq!(ca, cb);

    let path = dir.path().join("trace.csv");
    write_loss_trace(&path, &ta).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRACE_HEADER.join(","));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut t = Trainer::new(tiny_config(2), 3).unwrap();
    t.run(&ds, None).unwrap();
    let bytes = checkpoint_bytes(&t.config, &t.model);
    let (cfg, mut back) = parse_checkpoint(&bytes).unwrap();
    assert_eq!(cfg, t.config);
    assert_eq!(checkpoint_bytes(&cfg, &back), bytes);
    let batch = ds.batch(&[0, 1, 2], &[0, 0, 0], 4);
    assert_eq!(
        back.infer_batch(&batch.sil, &batch.smpl).unwrap(),
        t.model.infer_batch(&batch.sil, &batch.smpl).unwrap()
    );

    let offset = |b: &[u8]| match parse_checkpoint(b) {
        Err(Error::Format { offset, .. }) => offset,
        Err(e) => panic!("expected a format error, got {e}"),
        Ok(_) => panic!("corrupt checkpoint accepted"),
    };
    let mut b = bytes.clone();
    b[2] = b'X';
    assert_eq!(offset(&b), 0);
    let mut b = bytes.clone();
    b[4] = 7;
    assert_eq!(offset(&b), 4);
    let mut b = bytes.clone();
    b[10] ^= 1;
    assert_eq!(offset(&b), 6);
    assert!(offset(&bytes[..bytes.len() - 3]) > 42);
    let mut b = bytes.clone();
    b.extend_from_slice(&[0, 0]);
    assert_eq!(offset(&b), bytes.len() as u64);
}

fn micro_cfg() -> ModelConfig {
    ModelConfig { num_train_ids: 2, ..ModelConfig::micro() }
}

/// Gradients of every parameter after backpropagating `pick(terms)`.
fn grads(model: &mut ComboGait<f64>, w: &LossWeights, pick: impl Fn(&combogait::training::LossTerms) -> Var) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch = micro_batch(&model.arch.config, &[0, 0, 1, 1], 2, &mut rng);
    model.store.zero_grad();
    let snap = model.store.snapshot_buffers();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
    let mut ctx = Ctx::new(&mut model.store, Mode::Train, &mut drop_rng);
    let (_, terms) = batch_loss(&model.arch, &mut ctx, &batch, 0.2, w).unwrap();
    let target = pick(&terms);
    ctx.tape.backward(target).unwrap();
    ctx.accumulate_grads();
    drop(ctx);
    model.store.restore_buffers(snap);
    model.store.iter().map(|p| p.grad.clone()).collect()
}

#[test]
fn zero_beta_gives_attribute_path_exactly_zero_gradient() {
    let mut model = ComboGait::<f64>::new(&micro_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let g = grads(&mut model, &LossWeights::with_beta(0.0), |t| t.total);
    let mut attr = 0;
    for (p, g) in model.store.iter().zip(&g) {
        let is_attr = p.name.starts_with("head.") || p.name.starts_with("block") || p.name == "tokens";
        if is_attr {
            attr += 1;
            assert!(g.iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }
    assert!(attr > 0);
    assert!(g.iter().flatten().any(|&x| x != 0.0));

    let g = grads(&mut model, &LossWeights::default(), |t| t.total);
    let head = model.store.iter().position(|p| p.name == "head.age.weight").unwrap();
    assert!(g[head].iter().any(|&x| x != 0.0));
}

#[test]
fn total_gradient_is_the_weighted_sum_of_term_gradients() {
    let mut model = ComboGait::<f64>::new(&micro_cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let w = LossWeights { alpha_triplet: 0.7, alpha_ce: 1.3, beta_age: 0.2, beta_sex: 0.05, beta_bmi: 0.5 };
    let total = grads(&mut model, &w, |t| t.total);
    let picks: [fn(&combogait::training::LossTerms) -> Var; 5] = [|t| t.tri, |t| t.ce_gait, |t| t.age, |t| t.sex, |t| t.bmi];
    let per: Vec<_> = picks.iter().map(|p| grads(&mut model, &w, p)).collect();
    let ws = w.as_array();
    for (i, g) in total.iter().enumerate() {
        for (j, &x) in g.iter().enumerate() {
            let sum: f64 = (0..5).map(|k| ws[k] * per[k][i][j]).sum();
            assert!((x - sum).abs() <= 1e-10 * (1.0 + sum.abs()), "param {i}: {x} vs {sum}");
        }
    }
}

fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn triplet_loss_is_rotation_invariant(seed in any::<u64>(), c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = [0, 0, 1, 1, 2];
        let f = rand_tensor(&[5, c, 3], &mut rng);
        let r = random_rotation(c, &mut rng);
        let rotated = Tensor::from_fn(&[5, c, 3], |i| {
            let (b, k, p) = (i / (3 * c), (i / 3) % c, i % 3);
            (0..c).map(|j| r[k][j] * f.at(&[b, j, p])).sum()
        });
        prop_assert!((triplet(&f, &ids) - triplet(&rotated, &ids)).abs() < 1e-5);
        prop_assert!((triplet(&f, &ids) - triplet_oracle(&f, &ids, 0.2)).abs() < 1e-6);
    }
}
