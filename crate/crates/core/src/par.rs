//! Parallel execution helpers.
//!
//! With the `parallel` feature (on by default) the mapping helpers dispatch
//! to rayon; without it they run on plain iterators. The `*_seq` variants
//! always run sequentially so benchmarks can compare both paths inside one
//! binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
pub fn map<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Maps `f` over `0..count`, in parallel when the `parallel` feature is on.
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Sequential twin of [`map`].
pub fn map_seq<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    F: Fn(I) -> T,
{
    items.into_iter().map(f).collect()
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_sequential() {
        let xs: Vec<u64> = (0..100).collect();
        let a = map(xs.clone(), |x| x * x + 1);
        let b = map_seq(xs, |x| x * x + 1);
        assert_eq!(a, b);
    }

    #[test]
    fn map_indexed_matches_sequential() {
        let a = map_indexed(37, |i| 3 * i);
        let b = map_indexed_seq(37, |i| 3 * i);
        assert_eq!(a, b);
    }
}
