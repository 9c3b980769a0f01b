//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon pool;
//! without it they degrade to plain sequential loops. Every reduction in the
//! crate that goes through here either writes to disjoint slices or collects
//! per-chunk partials that the caller folds in a fixed index order, so results
//! are bitwise identical at any worker count, including one.

/// Applies `f` to consecutive `chunk_len`-sized mutable windows of `data`,
/// passing the chunk index. Writes are disjoint by construction.
pub fn for_each_chunk_mut<U, F>(data: &mut [U], chunk_len: usize, f: F)
where
    U: Send,
    F: Fn(usize, &mut [U]) + Sync,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Number of workers the parallel build will use (1 without the feature).
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_cover_every_slot() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i + 1;
            }
        });
        assert_eq!(v, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(5, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16]);
    }
}
