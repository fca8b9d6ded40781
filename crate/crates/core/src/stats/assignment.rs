/// Minimum-cost perfect assignment on a dense row-major `n × n` cost matrix
/// (shortest augmenting paths with potentials, `O(n³)`). Returns the column
/// matched to each row.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_to = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        min_to.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    polish_ties(cost, n, &u, &v, &mut col_of_row);
    col_of_row
}

/// Search-node budget for [`polish_ties`].
const POLISH_BUDGET: usize = 1 << 20;

fn row_order_total(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

// Optimal matchings are often tied in exact arithmetic (always so in one
// dimension when intervals nest), yet their float totals differ by an ulp.
// Every optimum lives on the tight edges of the final potentials; enumerate
// perfect matchings there and keep the smallest row-order total.
fn polish_ties(cost: &[f64], n: usize, u: &[f64], v: &[f64], perm: &mut [usize]) {
    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (cost[i * n + j] - u[i + 1] - v[j + 1]).abs() <= tol).collect())
        .collect();
    if tight.iter().all(|t| t.len() <= 1) {
        return;
    }
    let nonnegative = cost.iter().all(|&c| c >= 0.0);
    struct Search<'a> {
        cost: &'a [f64],
        n: usize,
        tight: &'a [Vec<usize>],
        used: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_total: f64,
        nodes: usize,
        prune: bool,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, partial: f64) {
            if self.nodes >= POLISH_BUDGET || (self.prune && partial >= self.best_total) {
                return;
            }
            self.nodes += 1;
            if i == self.n {
                if partial < self.best_total {
                    self.best_total = partial;
                    self.best.copy_from_slice(&self.current);
                }
                return;
            }
            for idx in 0..self.tight[i].len() {
                let j = self.tight[i][idx];
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.current[i] = j;
                self.go(i + 1, partial + self.cost[i * self.n + j]);
                self.used[j] = false;
            }
        }
    }
    let mut search = Search {
        cost,
        n,
        tight: &tight,
        used: vec![false; n],
        current: vec![0; n],
        best: perm.to_vec(),
        best_total: row_order_total(cost, n, perm),
        nodes: 0,
        prune: nonnegative,
    };
    search.go(0, 0.0);
    perm.copy_from_slice(&search.best);
}

/// Exhaustive search over all `n!` permutations; returns the best total
/// cost, summed in row order. Intended for small `n` only.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, cost: &[f64], n: usize, best: &mut f64) {
        if k == n {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            permute(k + 1, perm, cost, n, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut perm, cost, n, &mut best);
    if n == 0 {
        0.0
    } else {
        best
    }
}
