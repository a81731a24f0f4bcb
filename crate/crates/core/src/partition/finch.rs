//! First level of first-neighbor clustering.

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of each point's nearest other point (Euclidean, ties to the lowest
/// index). A lone point is its own neighbor.
pub fn first_neighbors<P: AsRef<[f64]>>(points: &[P]) -> Vec<usize> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut best = i;
            let mut best_d = f64::INFINITY;
            for j in (0..n).filter(|&j| j != i) {
                let d = sq_dist(points[i].as_ref(), points[j].as_ref());
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the first-neighbor graph, as index lists.
///
/// `i` and `j` share a component when `j = nn(i)`, `i = nn(j)` or
/// `nn(i) = nn(j)`; the last case is implied by the first two through the
/// shared neighbor, so linking every point to its neighbor is enough.
/// Components are returned ordered by their smallest member, members sorted.
pub fn first_partition<P: AsRef<[f64]>>(points: &[P]) -> Vec<Vec<usize>> {
    let nn = first_neighbors(points);
    let mut parent: Vec<usize> = (0..points.len()).collect();
    for (i, &j) in nn.iter().enumerate() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; points.len()];
    for i in 0..points.len() {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    groups
}
