use proptest::prelude::*;

use msrf_core::eval::{macro_f1, mae_rmse, micro_f1};
use msrf_core::interaction::{
    build_interaction_matrix, build_transfer_matrix, count_k_hop, InteractionMatrix, ModularityNull, Smoothing,
    TransferMatrix,
};
use msrf_core::netio::{LabelClass, RoadLevel, RoadNetwork, RoadSequence, Segment};
use msrf_core::numerics::{row_softmax, CsrMatrix, Tensor};
use msrf_core::regions::laplacian_eigens;
use msrf_core::scales::order_distribution;

fn segment(id: i64, from: i64, to: i64, level: RoadLevel) -> Segment {
    Segment {
        orig_id: id,
        from_node: from,
        to_node: to,
        geometry: vec![(from as f64 * 1e-3, 0.0), (to as f64 * 1e-3, 1e-3)],
        length_m: 100.0,
        lanes: 1,
        speed_kmh: 30.0,
        level,
        label: LabelClass::from_code(4).unwrap(),
    }
}

fn level(code: u8) -> RoadLevel {
    [RoadLevel::Highway, RoadLevel::Arterial, RoadLevel::Residential][code as usize % 3]
}

/// Segments as `(from, to, level)` over up to 12 nodes, plus walk seeds.
fn network_and_walks() -> impl Strategy<Value = (RoadNetwork, Vec<RoadSequence>)> {
    (prop::collection::vec((0i64..12, 0i64..12, 0u8..3), 2..30), prop::collection::vec((0usize..64, 1usize..9, any::<u64>()), 0..15))
        .prop_map(|(edges, walks)| {
            let segs = edges
                .into_iter()
                .enumerate()
                .map(|(id, (a, b, l))| segment(id as i64, a, if a == b { (b + 1) % 12 } else { b }, level(l)))
                .collect();
            let net = RoadNetwork::new(segs).unwrap();
            let seqs = walks
                .into_iter()
                .enumerate()
                .map(|(t, (start, len, mut choice))| {
                    let mut segs = vec![start % net.len()];
                    while segs.len() < len {
                        let succ = net.successors(*segs.last().unwrap());
                        if succ.is_empty() {
                            break;
                        }
                        segs.push(succ[(choice % succ.len() as u64) as usize]);
                        choice /= 7;
                    }
                    RoadSequence::collapsed(t as i64, segs)
                })
                .collect();
            (net, seqs)
        })
}

fn transfer_strategy() -> impl Strategy<Value = TransferMatrix> {
    (2usize..20).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(prop::option::weighted(0.3, 0.01f64..1.0), n), n).prop_map(move |w| {
            let rows = w
                .into_iter()
                .map(|row| {
                    let mut r: Vec<(usize, f64)> = row.into_iter().enumerate().filter_map(|(j, v)| v.map(|v| (j, v))).collect();
                    let total: f64 = r.iter().map(|e| e.1).sum();
                    r.iter_mut().for_each(|e| e.1 /= total);
                    r
                })
                .collect();
            TransferMatrix::from_csr(1, CsrMatrix::from_rows(n, rows).unwrap()).unwrap()
        })
    })
}

fn graph_strategy() -> impl Strategy<Value = InteractionMatrix> {
    (1usize..30).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 0..(2 * n)).prop_map(move |e| InteractionMatrix::new(1, n, e).unwrap())
    })
}

fn components(s: &InteractionMatrix) -> usize {
    let mut seen = vec![false; s.n()];
    let mut count = 0;
    for start in 0..s.n() {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for &v in s.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

proptest! {
    #[test]
    fn transfer_rows_are_stochastic((net, seqs) in network_and_walks(), k in 1usize..4) {
        let p = build_transfer_matrix(&count_k_hop(&seqs, k), &net, Smoothing::KHop);
        for i in 0..net.len() {
            let row: Vec<(usize, f64)> = p.row(i).collect();
            if p.row_present(i) {
                let sum: f64 = row.iter().map(|e| e.1).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&(j, v)| j != i && v > 0.0));
            } else {
                prop_assert!(row.is_empty());
            }
        }
    }

    #[test]
    fn first_order_rows_cover_successors((net, seqs) in network_and_walks()) {
        let p = build_transfer_matrix(&count_k_hop(&seqs, 1), &net, Smoothing::KHop);
        for i in 0..net.len() {
            prop_assert_eq!(p.row_present(i), !net.successors(i).is_empty());
        }
    }

    #[test]
    fn modularity_sums_to_zero(p in transfer_strategy()) {
        prop_assume!(p.nnz() > 0);
        let null = ModularityNull::new(&p);
        let mut total = 0.0;
        for i in 0..p.n() {
            for j in 0..p.n() {
                total += null.score(&p, i, j);
            }
        }
        prop_assert!(total.abs() < 1e-9);
    }

    #[test]
    fn interaction_is_symmetric_without_diagonal(p in transfer_strategy()) {
        prop_assume!(p.nnz() > 0);
        let s = build_interaction_matrix(&p).unwrap();
        let null = ModularityNull::new(&p);
        for i in 0..s.n() {
            prop_assert!(!s.has_edge(i, i));
            for j in 0..s.n() {
                prop_assert_eq!(s.has_edge(i, j), s.has_edge(j, i));
                if i != j {
                    prop_assert_eq!(s.has_edge(i, j), null.score(&p, i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_eigenvalues_count_components(s in graph_strategy()) {
        let eig = laplacian_eigens(&s, s.n()).unwrap();
        let zeros = eig.eigenvalues.iter().filter(|v| v.abs() < 1e-8).count();
        prop_assert_eq!(zeros, components(&s));
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn micro_f1_is_accuracy(pairs in prop::collection::vec((1usize..=5, 1usize..=5), 1..60)) {
        let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let acc = y.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        prop_assert_eq!(micro_f1(&y, &p, 5), acc);
    }

    #[test]
    fn macro_f1_ignores_label_names(pairs in prop::collection::vec((1usize..=4, 1usize..=4), 1..60), shift in 0usize..4) {
        let rename = |l: usize| (l - 1 + shift) % 4 + 1;
        let (y, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let (y2, p2): (Vec<usize>, Vec<usize>) = pairs.iter().map(|&(a, b)| (rename(a), rename(b))).unzip();
        prop_assert!((macro_f1(&y, &p, 4) - macro_f1(&y2, &p2, 4)).abs() < 1e-12);
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..60)) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (mae, rmse) = mae_rmse(&y, &p);
        prop_assert!(rmse >= mae - 1e-12);
    }

    #[test]
    fn order_histogram_closed_form((net, seqs) in network_and_walks(), k_max in 1usize..6) {
        let hist = order_distribution(&seqs, &net, k_max).unwrap();
        let want: u64 = seqs
            .iter()
            .map(|s| (1..=k_max).map(|o| s.segs.len().saturating_sub(o) as u64).sum::<u64>())
            .sum();
        prop_assert_eq!(hist.total(), want);
    }

    #[test]
    fn softmax_is_shift_invariant(rows in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 4), 1..6), c in -50.0f64..50.0) {
        let x = Tensor::from_rows(&rows);
        let shifted = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect::<Vec<_>>());
        let (a, b) = (row_softmax(&x, None).unwrap(), row_softmax(&shifted, None).unwrap());
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        for r in 0..a.rows() {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
