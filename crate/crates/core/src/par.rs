//! Minimal deterministic fan-out over worker threads.
//!
//! Work items are distributed by index, each item writes only its own
//! output slot, and no reduction order depends on scheduling, so results
//! are identical for any `jobs` value.

/// Run `f(i, &mut out[i])` for every item, split across `jobs` threads.
pub fn for_each_slot<T, F>(jobs: usize, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    let jobs = jobs.max(1);
    if jobs == 1 || out.len() <= 1 {
        for (i, slot) in out.iter_mut().enumerate() {
            f(i, slot);
        }
        return;
    }
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut base = 0;
        let chunk = rest.len().div_ceil(jobs);
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let start = base;
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    f(start + off, slot);
                }
            });
            rest = tail;
            base += take;
        }
    });
}

/// Run `f(i, chunk_i)` over consecutive `chunk_len` slices of `data`.
pub fn for_each_chunk<T, F>(jobs: usize, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert_eq!(data.len() % chunk_len.max(1), 0);
    let mut chunks: Vec<(usize, &mut [T])> = data.chunks_mut(chunk_len).enumerate().collect();
    for_each_slot(jobs, &mut chunks, |_, (i, chunk)| f(*i, chunk));
}

/// Map `f` over `0..n`, preserving index order in the result.
pub fn map_indexed<R, F>(jobs: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    for_each_slot(jobs, &mut out, |i, slot| *slot = Some(f(i)));
    out.into_iter().map(|v| v.expect("slot filled")).collect()
}
