//! Exact linear assignment (maximisation) by shortest augmenting paths.
//!
//! The solver runs the O(d³) Hungarian iteration on negated scores, then
//! walks the graph of tight edges (zero reduced cost under the final duals)
//! to pick the lexicographically smallest optimal permutation. Every
//! perfect matching in that graph is optimal, so the tie-break never trades
//! away objective value.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::Permutation;

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub permutation: Permutation,
    /// `Σᵢ M[i][π(i)]`.
    pub value: f64,
}

/// Maximises `Σᵢ M[i][π(i)]` over permutations.
pub fn lap_max(scores: &DMatrix<f64>) -> Result<AssignmentResult> {
    let d = scores.nrows();
    if scores.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: scores.ncols() });
    }
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("assignment score {x}")));
    }
    if d == 0 {
        return Ok(AssignmentResult { permutation: Permutation::identity(0), value: 0.0 });
    }
    let top = scores.max();
    let cost = DMatrix::from_fn(d, d, |i, j| top - scores[(i, j)]);
    let (mut row_to_col, u, v) = hungarian_min(&cost);

    let scale = cost.amax().max(1.0);
    let tol = 64.0 * f64::EPSILON * scale * d as f64;
    let tight = |i: usize, j: usize| cost[(i, j)] - u[i] - v[j] <= tol;
    lexicographic_matching(d, &mut row_to_col, tight);

    let permutation = Permutation::new(row_to_col).expect("assignment is a bijection");
    let value = (0..d).map(|i| scores[(i, permutation.at(i))]).sum();
    Ok(AssignmentResult { permutation, value })
}

/// Dense Hungarian method (Jonker–Volgenant style potentials). Returns the
/// row→column assignment with row and column duals satisfying
/// `cost[i][j] − u[i] − v[j] ≥ 0`, with equality on matched pairs.
fn hungarian_min(cost: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrites a perfect matching of the `tight` graph into the lexicographically
/// smallest perfect matching of that graph.
fn lexicographic_matching(d: usize, row_to_col: &mut [usize], tight: impl Fn(usize, usize) -> bool) {
    let mut col_to_row = vec![0usize; d];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut col_fixed = vec![false; d];
    let mut parent_col = vec![usize::MAX; d];
    let mut queue = Vec::with_capacity(d);

    for i in 0..d {
        let current = row_to_col[i];
        for j in 0..current {
            if col_fixed[j] || !tight(i, j) {
                continue;
            }
            // Row r loses column j to i; it must reach i's old column through
            // an alternating path over unfixed rows (> i) and columns.
            let r = col_to_row[j];
            parent_col.iter_mut().for_each(|p| *p = usize::MAX);
            queue.clear();
            queue.push(r);
            let mut head = 0;
            let mut found = None;
            'bfs: while head < queue.len() {
                let row = queue[head];
                head += 1;
                for c in 0..d {
                    if col_fixed[c] || c == j || parent_col[c] != usize::MAX || !tight(row, c) {
                        continue;
                    }
                    parent_col[c] = row;
                    if c == current {
                        found = Some(c);
                        break 'bfs;
                    }
                    queue.push(col_to_row[c]);
                }
            }
            if let Some(mut c) = found {
                // Flip the path back to r.
                loop {
                    let row = parent_col[c];
                    let prev = row_to_col[row];
                    row_to_col[row] = c;
                    col_to_row[c] = row;
                    if row == r {
                        break;
                    }
                    c = prev;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        col_fixed[row_to_col[i]] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(m: &DMatrix<f64>) -> (f64, Vec<Permutation>) {
        let d = m.nrows();
        let mut p = Permutation::identity(d);
        let mut best = f64::NEG_INFINITY;
        let mut all = Vec::new();
        loop {
            let v: f64 = (0..d).map(|i| m[(i, p.at(i))]).sum();
            all.push((v, p.clone()));
            best = best.max(v);
            if !p.next_lexicographic() {
                break;
            }
        }
        let argmax = all.into_iter().filter(|(v, _)| *v == best).map(|(_, p)| p).collect();
        (best, argmax)
    }

    #[test]
    fn small_examples() {
        let r = lap_max(&DMatrix::identity(2, 2)).unwrap();
        assert!(r.permutation.is_identity());
        assert_eq!(r.value, 2.0);
        let r = lap_max(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(r.permutation.as_slice(), &[1, 0]);
        assert_eq!(r.value, 2.0);
        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(lap_max(&bad), Err(Error::NonFinite(_))));
        assert!(lap_max(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn all_ties_pick_identity() {
        let r = lap_max(&DMatrix::from_element(5, 5, 0.2)).unwrap();
        assert!(r.permutation.is_identity());
    }

    #[test]
    fn integer_ties_pick_lexicographic_smallest() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let d = rng.random_range(1..=6);
            let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(0..3) as f64);
            let (best, argmax) = brute_force(&m);
            let r = lap_max(&m).unwrap();
            assert_eq!(r.value, best);
            assert_eq!(r.permutation, argmax[0], "matrix {m}");
        }
    }

    #[test]
    fn matches_brute_force_on_random_6x6() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let (best, argmax) = brute_force(&m);
            let r = lap_max(&m).unwrap();
            assert!((r.value - best).abs() <= 1e-12, "seed {seed}");
            if argmax.len() == 1 {
                assert_eq!(r.permutation, argmax[0]);
            }
        }
    }

    #[test]
    fn constant_shift_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let d = rng.random_range(2..=12);
            let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.0..10.0));
            let c = rng.random_range(-100.0..100.0);
            let shifted = m.add_scalar(c);
            assert_eq!(lap_max(&m).unwrap().permutation, lap_max(&shifted).unwrap().permutation);
        }
    }

    #[test]
    fn larger_instance_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = 120;
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.0..1.0));
        let r = lap_max(&m).unwrap();
        // No single swap can improve an optimal assignment.
        let p = r.permutation.as_slice();
        for a in 0..d {
            for b in (a + 1)..d {
                let delta = m[(a, p[b])] + m[(b, p[a])] - m[(a, p[a])] - m[(b, p[b])];
                assert!(delta <= 1e-12);
            }
        }
    }
}
