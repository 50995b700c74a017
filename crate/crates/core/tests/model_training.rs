use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msrf_core::interaction::{InteractionMatrix, TransferMatrix};
use msrf_core::model::{gt_layer_forward, FeatureMatrix, GtLayerParams, ModelConfig, ModelState, ScaleBinding};
use msrf_core::numerics::{read_checkpoint, write_checkpoint, CsrMatrix, Tensor};
use msrf_core::regions::RegionPartition;
use msrf_core::scales::ScaleOrders;
use msrf_core::training::{train, TrainConfig};

fn random_transfer(k: usize, n: usize, rng: &mut ChaCha8Rng) -> TransferMatrix {
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::new();
            for j in 0..n {
                if j != i && rng.gen_bool(0.4) {
                    row.push((j, rng.gen_range(0.05..1.0)));
                }
            }
            let total: f64 = row.iter().map(|e: &(usize, f64)| e.1).sum();
            row.iter_mut().for_each(|e| e.1 /= total);
            row
        })
        .collect();
    TransferMatrix::from_csr(k, CsrMatrix::from_rows(n, rows).unwrap()).unwrap()
}

fn permute_transfer(p: &TransferMatrix, perm: &[usize]) -> TransferMatrix {
    let n = p.n();
    let mut rows = vec![Vec::new(); n];
    for (i, j, v) in p.iter() {
        rows[perm[i]].push((perm[j], v));
    }
    for r in rows.iter_mut() {
        r.sort_by_key(|e| e.0);
    }
    TransferMatrix::from_csr(p.k(), CsrMatrix::from_rows(n, rows).unwrap()).unwrap()
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

struct Setup {
    f: FeatureMatrix,
    p1: TransferMatrix,
    scales: Vec<(TransferMatrix, Vec<usize>)>,
}

fn setup(n: usize, f: usize, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = random_tensor(n, f, &mut rng);
    let features = FeatureMatrix { data, names: (0..f).map(|c| format!("x{}", c)).collect() };
    let p1 = random_transfer(1, n, &mut rng);
    let scales = [2, 3, 4]
        .iter()
        .map(|&k| {
            let mut assign: Vec<usize> = (0..n).map(|i| i % 3).collect();
            assign[0] = 0;
            (random_transfer(k, n, &mut rng), assign)
        })
        .collect();
    Setup { f: features, p1, scales }
}

fn model(s: &Setup, d: usize, seed: u64) -> ModelState {
    let bindings = s
        .scales
        .iter()
        .map(|(p, a)| ScaleBinding::new(p.clone(), RegionPartition::new(p.k(), 3, a.clone()).unwrap(), 4096).unwrap())
        .collect();
    ModelState::new(ModelConfig { d, heads: 2, region_cap: 4096 }, s.f.f(), s.p1.clone(), bindings, seed).unwrap()
}

fn permuted(s: &Setup, perm: &[usize]) -> Setup {
    let n = perm.len();
    let mut data = Tensor::zeros(&[n, s.f.f()]);
    for i in 0..n {
        data.row_mut(perm[i]).copy_from_slice(s.f.data.row(i));
    }
    let scales = s
        .scales
        .iter()
        .map(|(p, a)| {
            let mut b = vec![0; n];
            for i in 0..n {
                b[perm[i]] = a[i];
            }
            (permute_transfer(p, perm), b)
        })
        .collect();
    Setup { f: FeatureMatrix { data, names: s.f.names.clone() }, p1: permute_transfer(&s.p1, perm), scales }
}

#[test]
fn forward_is_permutation_equivariant() {
    let n = 12;
    let s = setup(n, 5, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let t = permuted(&s, &perm);
    let mut a = model(&s, 8, 3);
    let mut b = model(&t, 8, 3);
    let ha = a.forward(&s.f).unwrap();
    let hb = b.forward(&t.f).unwrap();
    for i in 0..n {
        for c in 0..ha.cols() {
            assert!((ha.at(i, c) - hb.at(perm[i], c)).abs() < 1e-9, "row {} col {}", i, c);
        }
    }
}

#[test]
fn attention_is_block_diagonal() {
    let n = 9;
    let s = setup(n, 4, 21);
    let (p, assign) = &s.scales[0];
    let binding = ScaleBinding::new(p.clone(), RegionPartition::new(p.k(), 3, assign.clone()).unwrap(), 4096).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = 6;
    let layer = GtLayerParams {
        wq: (0..2).map(|_| random_tensor(d, 3, &mut rng)).collect(),
        wk: (0..2).map(|_| random_tensor(d, 3, &mut rng)).collect(),
        wv: (0..2).map(|_| random_tensor(d, 3, &mut rng)).collect(),
        wo: random_tensor(d, d, &mut rng),
        bias: random_tensor(2, 17, &mut rng),
    };
    let h = random_tensor(n, d, &mut rng);
    let (out, att) = gt_layer_forward(&h, &layer, &binding).unwrap();
    for region in &att {
        for head in region {
            for r in 0..head.rows() {
                assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    // Changing nodes of region 1 leaves the other regions untouched.
    let mut h2 = h.clone();
    for i in (0..n).filter(|&i| assign[i] == 1) {
        h2.row_mut(i).iter_mut().for_each(|x| *x += 3.0);
    }
    let (out2, _) = gt_layer_forward(&h2, &layer, &binding).unwrap();
    for i in (0..n).filter(|&i| assign[i] != 1) {
        assert_eq!(out.row(i), out2.row(i));
    }
}

fn grouped_scales(n: usize) -> Vec<InteractionMatrix> {
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|(i, j)| i % 3 == j % 3).collect();
    [2, 3, 4].iter().map(|&k| InteractionMatrix::new(k, n, edges.clone()).unwrap()).collect()
}

fn run_training(lr: f64, seed: u64) -> (ModelState, Vec<f64>) {
    let s = setup(12, 5, 31);
    let mut state = model(&s, 8, 5);
    let scales = grouped_scales(12);
    let cfg = TrainConfig { epochs: 15, lr, seed, ..TrainConfig::new(ScaleOrders::new(2, 3, 4).unwrap()) };
    let out = train(&mut state, &s.f, &scales.iter().collect::<Vec<_>>(), &cfg, &mut |_, _| Ok(())).unwrap();
    (state, out.losses)
}

#[test]
fn training_is_deterministic() {
    let (a, la) = run_training(1e-2, 7);
    let (b, lb) = run_training(1e-2, 7);
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
    let (_, lc) = run_training(1e-2, 8);
    assert_ne!(la, lc);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let s = setup(12, 5, 31);
    let before = model(&s, 8, 5);
    let (after, _) = run_training(0.0, 7);
    assert_eq!(before.params(), after.params());
}

#[test]
fn checkpoints_restore_the_model() {
    let (trained, _) = run_training(1e-2, 7);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &trained.named_params()).unwrap();
    let s = setup(12, 5, 31);
    let mut fresh = model(&s, 8, 99);
    fresh.load_params(read_checkpoint(buf.as_slice()).unwrap()).unwrap();
    assert_eq!(fresh.params(), trained.params());
}
