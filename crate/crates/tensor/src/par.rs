//! Data-parallel helpers. With the `parallel` feature these dispatch to
//! rayon; without it they run the same closures sequentially. Every helper
//! partitions work by index only, so results never depend on the thread
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(chunk_index, chunk)` for consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Elementwise map `out[i] = f(input[i])`, split into fixed blocks.
pub fn map_into<T, U, F>(input: &[T], out: &mut [U], f: F)
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
{
    debug_assert_eq!(input.len(), out.len());
    const BLOCK: usize = 1 << 14;
    for_each_chunk_mut(out, BLOCK, |ci, chunk| {
        let src = &input[ci * BLOCK..ci * BLOCK + chunk.len()];
        for (o, i) in chunk.iter_mut().zip(src) {
            *o = f(i);
        }
    });
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
