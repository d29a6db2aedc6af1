//! Frozen encoder pieces against explicit-loop oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tadformer::backbone::{self, BackboneConfig, BackboneWeights, BlockWeights, Frozen};
use tadformer::tensor::gradcheck::{self, Scheme, STEP};
use tadformer::tensor::kernels;
use tadformer::{ModelConfig, ParamGroup, ParamStore, Tadformer, Tape, Tensor, TuningMode, Var};

fn config(grid: [usize; 2], embed_dim: usize, depths: Vec<usize>, heads: Vec<usize>, mlp_ratio: f64) -> BackboneConfig {
    BackboneConfig { grid, patch_size: 1, in_channels: 3, embed_dim, depths, heads, mlp_ratio, ln_eps: 1e-5 }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// One-stage backbone with random (not unit) norms and biases.
fn block(grid: [usize; 2], c: usize, heads: usize, seed: u64) -> (BlockWeights, ParamStore<f64>) {
    let cfg = config(grid, c, vec![1], vec![heads], 2.0);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = BackboneWeights::init(&cfg, &mut store, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).group == ParamGroup::Norm || store.get(id).group == ParamGroup::PosBias {
            let shape = store.tensor(id).shape().to_vec();
            *store.tensor_mut(id) = Tensor::from_fn(&shape, |_| rng.gen_range(0.2..1.2));
        }
    }
    (w.stages[0].blocks[0].clone(), store)
}

fn all_frozen(store: &ParamStore<f64>, tape: &mut Tape<f64>) -> tadformer::params::Bindings {
    store.bind(tape, &vec![false; store.len()])
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    x.iter().zip(g).zip(b).map(|((a, g), b)| (a - m) / (v + eps).sqrt() * g + b).collect()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|j| (0..i).map(|k| x[k] * w.at(&[k, j])).sum::<f64>() + b.map_or(0.0, |b| b.data()[j]))
        .collect()
}

#[test]
fn attention_matches_naive_loop() {
    // B=1, T=2 prompts, 2×2 grid, C=8, H=2
    let (blk, store) = block([2, 2], 8, 2, 11);
    let (p, n, c, h) = (2usize, 4usize, 8usize, 2usize);
    let l = p + n;
    let d = c / h;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_t(&mut rng, &[1, l, c]);

    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(x.clone());
    let out = blk.attention_forward(&mut tape, &vars, xv, p, &Frozen).unwrap();
    let (attn, feat) = (tape.value(out.attn).clone(), tape.value(out.features).clone());

    let t = |id| store.tensor(id);
    let qkv: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let row = &x.data()[i * c..(i + 1) * c];
            let normed = ln_row(row, t(blk.ln1.gamma).data(), t(blk.ln1.beta).data(), 1e-5);
            affine(&normed, t(blk.qkv.weight), blk.qkv.bias.map(t))
        })
        .collect();
    let table = t(blk.pos_bias);
    for hd in 0..h {
        for i in 0..l {
            let mut scores = vec![0.0; l];
            for (j, s) in scores.iter_mut().enumerate() {
                let dot: f64 = (0..d).map(|e| qkv[i][hd * d + e] * qkv[j][c + hd * d + e]).sum();
                *s = dot / (d as f64).sqrt();
                if i >= p && j >= p {
                    let (a, b) = (i - p, j - p);
                    let (dy, dx) = (a / 2 + 1 - b / 2, a % 2 + 1 - b % 2);
                    *s += table.at(&[hd, dy * 3 + dx]);
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let probs: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
            for j in 0..l {
                assert!((attn.at(&[0, hd, i, j]) - probs[j]).abs() <= 1e-12);
            }
            for e in 0..d {
                let want: f64 = (0..l).map(|j| probs[j] * qkv[j][2 * c + hd * d + e]).sum();
                assert!((feat.at(&[0, i, hd * d + e]) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one_including_prompt_rows() {
    for seed in 0..20 {
        let (blk, store) = block([2, 4], 8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = Tensor::<f32>::from_fn(&[2, 3 + 8, 8], |_| rng.gen_range(-4.0..4.0));
        let store = store.cast::<f32>();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, &vec![false; store.len()]);
        let xv = tape.constant(x);
        let out = blk.attention_forward(&mut tape, &vars, xv, 3, &Frozen).unwrap();
        for row in tape.value(out.attn).data().chunks(11) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6, "seed {seed}: row sums to {s}");
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let (blk, store) = block([1, 1], 4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[1, 1, 4]);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(x.clone());
    let out = blk.attention_forward(&mut tape, &vars, xv, 0, &Frozen).unwrap();
    assert!(tape.value(out.attn).data().iter().all(|&a| a == 1.0));
    let t = |id| store.tensor(id);
    let normed = ln_row(x.data(), t(blk.ln1.gamma).data(), t(blk.ln1.beta).data(), 1e-5);
    let qkv = affine(&normed, t(blk.qkv.weight), blk.qkv.bias.map(t));
    for (got, want) in tape.value(out.features).data().iter().zip(&qkv[8..]) {
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn zero_values_give_zero_features() {
    let (blk, mut store) = block([2, 2], 8, 2, 5);
    // zero the value third of the qkv projection
    let w = store.tensor_mut(blk.qkv.weight);
    for i in 0..8 {
        for j in 16..24 {
            w.data_mut()[i * 24 + j] = 0.0;
        }
    }
    let b = store.tensor_mut(blk.qkv.bias.unwrap());
    b.data_mut()[16..].fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(rand_t(&mut rng, &[2, 6, 8]));
    let out = blk.attention_forward(&mut tape, &vars, xv, 2, &Frozen).unwrap();
    assert!(tape.value(out.features).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rejects_wrong_width() {
    let (blk, store) = block([2, 2], 8, 2, 5);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(Tensor::zeros(&[1, 4, 6]));
    assert!(matches!(
        blk.attention_forward(&mut tape, &vars, xv, 0, &Frozen),
        Err(tadformer::Error::Shape { .. })
    ));
}

#[test]
fn attention_is_permutation_equivariant_without_position_bias() {
    let (blk, mut store) = block([3, 3], 8, 2, 7);
    store.tensor_mut(blk.pos_bias).data_mut().fill(0.0);
    let (p, n, c) = (2usize, 9usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_t(&mut rng, &[1, p + n, c]);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let permuted = Tensor::from_fn(&[1, p + n, c], |k| {
        let (i, e) = (k / c, k % c);
        let src = if i < p { i } else { p + perm[i - p] };
        x.data()[src * c + e]
    });
    let run = |input: Tensor<f64>| {
        let mut tape = Tape::new();
        let vars = all_frozen(&store, &mut tape);
        let xv = tape.constant(input);
        let out = blk.attention_forward(&mut tape, &vars, xv, p, &Frozen).unwrap();
        tape.value(out.features).clone()
    };
    let (base, moved) = (run(x), run(permuted));
    for i in 0..p + n {
        let src = if i < p { i } else { p + perm[i - p] };
        for e in 0..c {
            assert!((moved.at(&[0, i, e]) - base.at(&[0, src, e])).abs() <= 1e-12);
        }
    }
}

#[test]
fn mlp_identity_layers_give_gelu_of_one() {
    let cfg = config([1, 1], 4, vec![1], vec![2], 1.0);
    let mut store = ParamStore::<f64>::new();
    let w = BackboneWeights::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let blk = &w.stages[0].blocks[0];
    for lin in [blk.fc1, blk.fc2] {
        *store.tensor_mut(lin.weight) = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        store.tensor_mut(lin.bias.unwrap()).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let x = tape.constant(Tensor::ones(&[1, 1, 4]));
    let y = blk.mlp_forward(&mut tape, &vars, x, &Frozen).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.841_344_746_068_543).abs() <= 1e-7);
    }
}

#[test]
fn mlp_matches_composed_kernels() {
    let (blk, store) = block([2, 2], 8, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_t(&mut rng, &[2, 3, 8]);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(x.clone());
    let y = blk.mlp_forward(&mut tape, &vars, xv, &Frozen).unwrap();
    let t = |id| store.tensor(id);
    for (row, got) in x.data().chunks(8).zip(tape.value(y).data().chunks(8)) {
        let hidden: Vec<f64> = affine(row, t(blk.fc1.weight), blk.fc1.bias.map(t)).into_iter().map(kernels::gelu).collect();
        let want = affine(&hidden, t(blk.fc2.weight), blk.fc2.bias.map(t));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn patch_embed_matches_explicit_extraction() {
    let cfg = BackboneConfig { patch_size: 2, ..config([3, 2], 8, vec![1], vec![2], 2.0) };
    let mut store = ParamStore::<f64>::new();
    let w = BackboneWeights::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = rand_t(&mut rng, &[2, 3, 6, 4]);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let iv = tape.constant(img.clone());
    let y = backbone::patch_embed(&mut tape, &vars, &w.embed, 2, iv).unwrap();
    assert_eq!(tape.shape(y), &[2, 6, 8]);
    let (ew, eb) = (store.tensor(w.embed.weight), store.tensor(w.embed.bias.unwrap()));
    for b in 0..2 {
        for py in 0..3 {
            for px in 0..2 {
                let mut patch = Vec::new();
                for ch in 0..3 {
                    for i in 0..2 {
                        for j in 0..2 {
                            patch.push(img.at(&[b, ch, 2 * py + i, 2 * px + j]));
                        }
                    }
                }
                let want = affine(&patch, ew, Some(eb));
                for (e, w) in want.iter().enumerate() {
                    assert!((tape.value(y).at(&[b, py * 2 + px, e]) - w).abs() <= 1e-12);
                }
            }
        }
    }
    let zero = tape.constant(Tensor::zeros(&[1, 3, 6, 4]));
    let z = backbone::patch_embed(&mut tape, &vars, &w.embed, 2, zero).unwrap();
    for row in tape.value(z).data().chunks(8) {
        assert_eq!(row, eb.data());
    }
    let odd = tape.constant(Tensor::zeros(&[1, 3, 5, 4]));
    assert!(matches!(backbone::patch_embed(&mut tape, &vars, &w.embed, 2, odd), Err(tadformer::Error::Config(_))));
}

#[test]
fn patch_merge_selects_top_left_token() {
    let c = 3;
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = rand_t(&mut rng, &[1, 4, c]);
    // first C×2C block is [I | 0], the other three are zero
    let w = Tensor::from_fn(&[4 * c, 2 * c], |k| {
        let (i, j) = (k / (2 * c), k % (2 * c));
        if i < c && i == j { 1.0 } else { 0.0 }
    });
    let (tv, wv) = (tape.constant(tokens.clone()), tape.constant(w));
    let y = backbone::patch_merge(&mut tape, tv, wv, (2, 2)).unwrap();
    let mut want = tokens.data()[..c].to_vec();
    want.extend([0.0; 3]);
    assert_eq!(tape.value(y).data(), &want[..]);
}

#[test]
fn patch_merge_matches_gather_and_matmul() {
    let (h, w, c) = (4usize, 6usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = rand_t(&mut rng, &[2, h * w, c]);
    let weight = rand_t(&mut rng, &[4 * c, 2 * c]);
    let mut tape = Tape::new();
    let (tv, wv) = (tape.constant(tokens.clone()), tape.constant(weight.clone()));
    let y = backbone::patch_merge(&mut tape, tv, wv, (h, w)).unwrap();
    for b in 0..2 {
        for my in 0..h / 2 {
            for mx in 0..w / 2 {
                let mut cat = Vec::new();
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let n = (2 * my + dy) * w + 2 * mx + dx;
                    cat.extend((0..c).map(|e| tokens.at(&[b, n, e])));
                }
                let want = affine(&cat, &weight, None);
                for (e, v) in want.iter().enumerate() {
                    assert!((tape.value(y).at(&[b, my * (w / 2) + mx, e]) - v).abs() <= 1e-12);
                }
            }
        }
    }
    let zero = tape.constant(Tensor::zeros(&[1, h * w, c]));
    let z = backbone::patch_merge(&mut tape, zero, wv, (h, w)).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    let odd = tape.constant(Tensor::zeros(&[1, 3 * 2, c]));
    assert!(matches!(backbone::patch_merge(&mut tape, odd, wv, (3, 2)), Err(tadformer::Error::Config(_))));
}

fn model_config(depths: Vec<usize>, head_outputs: Vec<usize>) -> ModelConfig {
    ModelConfig {
        backbone: config([4, 4], 8, depths, vec![2, 2], 2.0),
        rank: 4,
        kernel_size: 3,
        filter_norm_eps: 1e-5,
        head_outputs,
    }
}

#[test]
fn two_block_stage_replays_block_by_block() {
    let (model, store) = Tadformer::new::<f64>(model_config(vec![2, 1], vec![2, 1]), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[2, 2 + 16, 8]);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(x);
    // without low-rank deltas the shared stream is the frozen backbone
    let trace = model.stage_forward(&mut tape, &vars, 0, xv, 2, TuningMode::DecodersOnly).unwrap();
    let blocks = &model.backbone.stages[0].blocks;
    let y = blocks[0].forward(&mut tape, &vars, xv, 2, &Frozen).unwrap();
    let y = blocks[1].forward(&mut tape, &vars, y, 2, &Frozen).unwrap();
    assert!(tape.value(trace.shared).bitwise_eq(tape.value(y)));
    assert_eq!(trace.tasks.len(), 2);
}

#[test]
fn no_tasks_is_a_plain_stage() {
    let (model, store) = Tadformer::new::<f64>(model_config(vec![1, 1], vec![]), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let vars = all_frozen(&store, &mut tape);
    let xv = tape.constant(rand_t(&mut rng, &[1, 16, 8]));
    let trace = model.stage_forward(&mut tape, &vars, 0, xv, 0, TuningMode::Tadformer).unwrap();
    assert!(trace.tasks.is_empty());
    let y = model.backbone.stages[0].blocks[0].forward(&mut tape, &vars, xv, 0, &Frozen).unwrap();
    // up-projections start at zero, so the adapted stage equals the frozen one
    assert!(tape.value(trace.shared).bitwise_eq(tape.value(y)));
}

#[test]
fn one_full_stage_passes_the_gradient_audit() {
    // C=8, H=2, N=16, T=2
    let (model, mut store) = Tadformer::new::<f64>(model_config(vec![2, 1], vec![2, 1]), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let p = store.get(id);
        if p.name.ends_with("/up") || p.group == ParamGroup::Gate {
            let shape = p.tensor.shape().to_vec();
            *store.tensor_mut(id) = Tensor::from_fn(&shape, |_| rng.gen_range(-0.5..0.5));
        }
    }
    let x = rand_t(&mut rng, &[2, 16, 8]);
    let probe = rand_t(&mut rng, &[2, 16, 8]);
    let stage0 = |name: &str| name.starts_with("peft/s0/") || name.starts_with("backbone/s0/") || name == "peft/prompts";
    let mode = TuningMode::Tadformer;
    let trainable: Vec<_> = ids
        .iter()
        .copied()
        .filter(|&id| mode.is_trainable(store.get(id).group) && stage0(&store.get(id).name))
        .collect();
    let inputs: Vec<Tensor<f64>> = trainable.iter().map(|&id| store.tensor(id).clone()).collect();
    let audit = gradcheck::audit(&inputs, Scheme::Richardson, STEP, 1e-8, |tape, xs| {
        let vars: Vec<Var> = store
            .iter()
            .map(|(id, p)| match trainable.iter().position(|&t| t == id) {
                Some(k) => xs[k],
                None => tape.constant(p.tensor.clone()),
            })
            .collect();
        let vars = tadformer::params::Bindings::from_vars(vars);
        let patches = tape.constant(x.clone());
        let prompts = vars[model.prompts.unwrap()];
        let seq = tadformer::peft::prepend_task_prompts(tape, patches, Some(prompts))?;
        let trace = model.stage_forward(tape, &vars, 0, seq, 2, mode)?;
        let r = tape.constant(probe.clone());
        let mut total = None;
        for t in &trace.tasks {
            let m = tape.mul(t.out, r)?;
            let s = tape.sum(m)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        tape.sum(total.unwrap())
    })
    .unwrap();
    assert!(audit.worst() <= 1e-4, "worst relative error {:e}", audit.worst());
}
