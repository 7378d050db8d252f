//! Ordered data-parallel map. Uses rayon with the `parallel` feature and a
//! plain iterator otherwise; results are always in input order.

/// True when built with the `parallel` feature.
pub const PARALLEL: bool = cfg!(feature = "parallel");

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

/// Runs `f` with at most `jobs` worker threads (0 = library default).
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn parallel_matches_sequential(xs in proptest::collection::vec(any::<i64>(), 0..200)) {
            let f = |x: &i64| x.wrapping_mul(31).wrapping_add(7);
            prop_assert_eq!(map(&xs, f), map_sequential(&xs, f));
        }
    }

    #[test]
    fn with_jobs_runs_closure() {
        assert_eq!(with_jobs(2, || map(&[1, 2, 3], |x| x * 2)), vec![2, 4, 6]);
    }
}
