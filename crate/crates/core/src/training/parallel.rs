//! Per-document fan-out. Results come back in input order either way, so
//! gradient sums are identical with and without the `parallel` feature.

/// Maps `f` over `items` on the rayon pool when the `parallel` feature is on,
/// otherwise on the calling thread.
pub fn map_docs<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_docs_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_docs_sequential(items, f)
    }
}

pub fn map_docs_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_docs_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}
