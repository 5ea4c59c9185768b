//! Fast non-dominated sorting, crowding distance and μ+λ truncation.

use std::cmp::Ordering;

use super::OptError;
use crate::model::{Candidate, Direction, ObjectiveSpec};

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64], dirs: &[Direction]) -> Result<bool, OptError> {
    if a.len() != dirs.len() || b.len() != dirs.len() {
        return Err(OptError::ArityMismatch { expected: dirs.len(), got: a.len().max(b.len()) });
    }
    Ok(dominates_unchecked(a, b, dirs))
}

fn dominates_unchecked(a: &[f64], b: &[f64], dirs: &[Direction]) -> bool {
    let mut strictly = false;
    for ((&x, &y), &d) in a.iter().zip(b).zip(dirs) {
        if d.better(y, x) {
            return false;
        }
        if d.better(x, y) {
            strictly = true;
        }
    }
    strictly
}

pub fn directions(specs: &[ObjectiveSpec]) -> Vec<Direction> {
    specs.iter().map(|s| s.direction).collect()
}

/// Fronts of indices into `points`, best first. Members of each front keep
/// their input order.
pub fn nondominated_sort(points: &[&[f64]], dirs: &[Direction]) -> Result<Vec<Vec<usize>>, OptError> {
    for p in points {
        if p.len() != dirs.len() {
            return Err(OptError::ArityMismatch { expected: dirs.len(), got: p.len() });
        }
    }
    let n = points.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dom_count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates_unchecked(points[i], points[j], dirs) {
                dominated_by_me[i].push(j);
                dom_count[j] += 1;
            } else if dominates_unchecked(points[j], points[i], dirs) {
                dominated_by_me[j].push(i);
                dom_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dom_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                dom_count[j] -= 1;
                if dom_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::take(&mut current));
        current = next;
    }
    Ok(fronts)
}

/// Crowding distance of each member of `front`, aligned with it.
pub fn crowding_distance(points: &[&[f64]], front: &[usize]) -> Vec<f64> {
    let k = front.len();
    if k <= 2 {
        return vec![f64::INFINITY; k];
    }
    let m = points[front[0]].len();
    let mut dist = vec![0.0; k];
    let mut order: Vec<usize> = (0..k).collect();
    #[allow(clippy::needless_range_loop)]
    for obj in 0..m {
        order.sort_by(|&a, &b| points[front[a]][obj].total_cmp(&points[front[b]][obj]).then(a.cmp(&b)));
        let lo = points[front[order[0]]][obj];
        let hi = points[front[order[k - 1]]][obj];
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        dist[order[0]] = f64::INFINITY;
        dist[order[k - 1]] = f64::INFINITY;
        for w in 1..k - 1 {
            let prev = points[front[order[w - 1]]][obj];
            let next = points[front[order[w + 1]]][obj];
            dist[order[w]] += (next - prev) / range;
        }
    }
    dist
}

/// Crowded-comparison order: lower rank first, then larger crowding.
pub fn crowded_cmp(rank_a: usize, crowd_a: f64, rank_b: usize, crowd_b: f64) -> Ordering {
    rank_a.cmp(&rank_b).then_with(|| crowd_b.total_cmp(&crowd_a))
}

/// Rank, crowding distance and fronts.
pub type Ranking = (Vec<usize>, Vec<f64>, Vec<Vec<usize>>);

/// Ranks and crowding for every point.
pub fn rank_and_crowd(points: &[&[f64]], dirs: &[Direction]) -> Result<Ranking, OptError> {
    let fronts = nondominated_sort(points, dirs)?;
    let mut rank = vec![0; points.len()];
    let mut crowd = vec![0.0; points.len()];
    for (r, front) in fronts.iter().enumerate() {
        for (&i, d) in front.iter().zip(crowding_distance(points, front)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    Ok((rank, crowd, fronts))
}

/// Keeps `mu` survivors: whole fronts while they fit, then the most
/// crowded-apart members of the first front that does not. Ties keep input
/// order.
pub fn truncate(points: &[&[f64]], dirs: &[Direction], mu: usize) -> Result<Vec<usize>, OptError> {
    let fronts = nondominated_sort(points, dirs)?;
    let mut out = Vec::with_capacity(mu);
    for front in fronts {
        if out.len() + front.len() <= mu {
            out.extend(front);
        } else {
            let d = crowding_distance(points, &front);
            let mut order: Vec<usize> = (0..front.len()).collect();
            order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            let need = mu - out.len();
            let mut chosen: Vec<usize> = order[..need].to_vec();
            chosen.sort_unstable();
            out.extend(chosen.into_iter().map(|i| front[i]));
        }
        if out.len() == mu {
            break;
        }
    }
    Ok(out)
}

fn objective_rows(cands: &[Candidate]) -> Result<Vec<&[f64]>, OptError> {
    cands.iter().map(|c| c.objectives.as_ref().map(|o| o.values()).ok_or_else(|| OptError::Unevaluated(c.id.clone()))).collect()
}

/// Sets `rank` and `crowding` on every candidate and returns the fronts.
pub fn assign(cands: &mut [Candidate], specs: &[ObjectiveSpec]) -> Result<Vec<Vec<usize>>, OptError> {
    let dirs = directions(specs);
    let (rank, crowd, fronts) = {
        let rows = objective_rows(cands)?;
        rank_and_crowd(&rows, &dirs)?
    };
    for (i, c) in cands.iter_mut().enumerate() {
        c.rank = Some(rank[i]);
        c.crowding = Some(crowd[i]);
    }
    Ok(fronts)
}

/// Environmental selection over `pool`, returning the survivors with ranks
/// and crowding recomputed among themselves.
pub fn environmental_selection(pool: Vec<Candidate>, specs: &[ObjectiveSpec], mu: usize) -> Result<Vec<Candidate>, OptError> {
    let dirs = directions(specs);
    let keep = {
        let rows = objective_rows(&pool)?;
        truncate(&rows, &dirs, mu)?
    };
    let mut slots: Vec<Option<Candidate>> = pool.into_iter().map(Some).collect();
    let mut survivors: Vec<Candidate> = keep.into_iter().map(|i| slots[i].take().expect("index used once")).collect();
    assign(&mut survivors, specs)?;
    Ok(survivors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Direction::{Maximize as Max, Minimize as Min};
    use proptest::prelude::*;

    fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn dominance_examples() {
        let dirs = [Max, Min, Min];
        assert!(dominates(&[0.9, 5.0, 400.0], &[0.8, 6.0, 500.0], &dirs).unwrap());
        assert!(!dominates(&[0.9, 6.0, 400.0], &[0.8, 5.0, 500.0], &dirs).unwrap());
        assert!(!dominates(&[0.8, 5.0, 500.0], &[0.9, 6.0, 400.0], &dirs).unwrap());
        assert!(!dominates(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &dirs).unwrap());
        assert!(matches!(dominates(&[1.0], &[1.0, 2.0], &[Min, Min]), Err(OptError::ArityMismatch { .. })));
    }

    #[test]
    fn sort_examples() {
        let pts = vec![vec![1.0, 1.0], vec![1.0, 2.0], vec![2.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(nondominated_sort(&rows(&pts), &[Min, Min]).unwrap(), vec![vec![0], vec![1, 2], vec![3]]);
        let same = vec![vec![3.0, 3.0]; 5];
        assert_eq!(nondominated_sort(&rows(&same), &[Min, Min]).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(nondominated_sort(&rows(&[vec![1.0, 2.0]]), &[Min, Min]).unwrap(), vec![vec![0]]);
    }

    #[test]
    fn crowding_examples() {
        let pts = vec![vec![1.0, 3.0], vec![2.0, 2.0], vec![3.0, 1.0]];
        let d = crowding_distance(&rows(&pts), &[0, 1, 2]);
        assert_eq!(d, vec![f64::INFINITY, 2.0, f64::INFINITY]);
        let two = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(crowding_distance(&rows(&two), &[0, 1]), vec![f64::INFINITY; 2]);
        let flat = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![4.0, 5.0]];
        assert_eq!(crowding_distance(&rows(&flat), &[0, 1, 2]), vec![f64::INFINITY, 1.0, f64::INFINITY]);
    }

    #[test]
    fn truncation_prefers_spread() {
        let pts = vec![vec![1.0, 4.0], vec![2.0, 3.0], vec![2.1, 2.9], vec![4.0, 1.0], vec![5.0, 5.0]];
        let keep = truncate(&rows(&pts), &[Min, Min], 3).unwrap();
        assert_eq!(keep.len(), 3);
        assert!(keep.contains(&0) && keep.contains(&3));
        assert!(!keep.contains(&4));
    }

    fn brute_fronts(pts: &[Vec<f64>], dirs: &[Direction]) -> Vec<Vec<usize>> {
        let mut left: Vec<usize> = (0..pts.len()).collect();
        let mut fronts = Vec::new();
        while !left.is_empty() {
            let front: Vec<usize> =
                left.iter().copied().filter(|&i| !left.iter().any(|&j| dominates(&pts[j], &pts[i], dirs).unwrap())).collect();
            left.retain(|i| !front.contains(i));
            fronts.push(front);
        }
        fronts
    }

    fn population() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Direction>)> {
        (2usize..=4).prop_flat_map(|m| {
            (
                proptest::collection::vec(proptest::collection::vec((0u8..6).prop_map(f64::from), m), 1..=64),
                proptest::collection::vec(prop_oneof![Just(Min), Just(Max)], m),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((pts, dirs) in population()) {
            prop_assert_eq!(nondominated_sort(&rows(&pts), &dirs).unwrap(), brute_fronts(&pts, &dirs));
        }

        #[test]
        fn fronts_are_antichains_and_partition((pts, dirs) in population()) {
            let fronts = nondominated_sort(&rows(&pts), &dirs).unwrap();
            let mut seen: Vec<usize> = fronts.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..pts.len()).collect::<Vec<_>>());
            for f in &fronts {
                for &a in f {
                    for &b in f {
                        prop_assert!(!dominates(&pts[a], &pts[b], &dirs).unwrap());
                    }
                }
            }
        }

        #[test]
        fn ranks_invariant_under_positive_scaling((pts, dirs) in population(), k in 0.01f64..100.0) {
            let obj = dirs.iter().position(|d| *d == Min);
            prop_assume!(obj.is_some());
            let obj = obj.unwrap();
            let scaled: Vec<Vec<f64>> = pts.iter().map(|p| { let mut q = p.clone(); q[obj] *= k; q }).collect();
            prop_assert_eq!(nondominated_sort(&rows(&pts), &dirs).unwrap(), nondominated_sort(&rows(&scaled), &dirs).unwrap());
        }

        #[test]
        fn truncation_keeps_each_objective_best((pts, dirs) in population(), mu in 1usize..10) {
            let mu = mu.max(2 * dirs.len()).min(pts.len());
            let keep = truncate(&rows(&pts), &dirs, mu).unwrap();
            prop_assert_eq!(keep.len(), mu);
            for (m, d) in dirs.iter().enumerate() {
                let best = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| pts[i][m]).fold(None, |acc: Option<f64>, v| match acc {
                    None => Some(v),
                    Some(a) => Some(if d.better(v, a) { v } else { a }),
                }).unwrap();
                prop_assert_eq!(best(&mut (0..pts.len())), best(&mut keep.iter().copied()));
            }
        }
    }
}
