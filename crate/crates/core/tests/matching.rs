mod common;

use common::{brute_force_assignment, rng};
use eventgraph::matching::hungarian;
use rand::Rng;

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut r = rng(21);
    for case in 0..200 {
        let rows = r.gen_range(1..=6);
        let cols = r.gen_range(rows..=12);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| r.gen_range(-5.0..5.0)).collect())
            .collect();
        let a = hungarian(&cost).unwrap();
        let mut used = a.row_to_col.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), rows, "case {case}: not injective");
        let direct: f64 = a.row_to_col.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(direct, a.total_cost);
        assert!((a.total_cost - brute_force_assignment(&cost)).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn integer_costs_match_exactly() {
    let mut r = rng(22);
    for _ in 0..200 {
        let rows = r.gen_range(1..=6);
        let cols = r.gen_range(rows..=12);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| r.gen_range(0..20) as f64).collect())
            .collect();
        assert_eq!(hungarian(&cost).unwrap().total_cost, brute_force_assignment(&cost));
    }
}
