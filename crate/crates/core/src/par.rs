//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the indexed map runs on the rayon
//! pool; without it, the sequential fallback is used. Both produce identical,
//! order-preserving output: every item's computation depends only on its own
//! index and input. The sequential variants stay available under either
//! feature so benchmarks can compare the two paths directly.

/// Order-preserving indexed map over a slice.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Order-preserving indexed map over a slice (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    map_indexed_seq(items, f)
}

/// Sequential indexed map; the fallback the parallel path must agree with.
pub fn map_indexed_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Fold the results of an indexed map pairwise with `merge`. Used for
/// confusion-matrix accumulation where the merge is exact (integer sums).
#[cfg(feature = "parallel")]
pub fn map_reduce<T, U, F, M>(items: &[T], f: F, identity: impl Fn() -> U + Sync + Send, merge: M) -> U
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
    M: Fn(U, U) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items
        .par_iter()
        .enumerate()
        .map(|(i, t)| f(i, t))
        .reduce(identity, merge)
}

#[cfg(not(feature = "parallel"))]
pub fn map_reduce<T, U, F, M>(items: &[T], f: F, identity: impl Fn() -> U, merge: M) -> U
where
    F: Fn(usize, &T) -> U,
    M: Fn(U, U) -> U,
{
    map_reduce_seq(items, f, identity, merge)
}

/// Sequential map-reduce fallback.
pub fn map_reduce_seq<T, U, F, M>(items: &[T], f: F, identity: impl Fn() -> U, merge: M) -> U
where
    F: Fn(usize, &T) -> U,
    M: Fn(U, U) -> U,
{
    items
        .iter()
        .enumerate()
        .fold(identity(), |acc, (i, t)| merge(acc, f(i, t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..100).collect();
        let f = |i: usize, x: &u64| *x * 3 + i as u64;
        assert_eq!(map_indexed(&xs, f), map_indexed_seq(&xs, f));
    }

    #[test]
    fn map_reduce_matches_sequential_sum() {
        let xs: Vec<u64> = (1..=50).collect();
        let par = map_reduce(&xs, |_, x| *x, || 0u64, |a, b| a + b);
        let seq = map_reduce_seq(&xs, |_, x| *x, || 0u64, |a, b| a + b);
        assert_eq!(par, seq);
        assert_eq!(par, 1275);
    }
}
