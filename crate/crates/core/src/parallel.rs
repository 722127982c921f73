//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] fans
//! work out over the rayon pool; without it, both modes run sequentially.
//! Results are always returned in input order, so reductions performed by
//! callers over the returned vector are bitwise identical in either mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Order-preserving map over fixed-size chunks of a slice.
    ///
    /// Chunk boundaries depend only on `chunk_len`, never on the thread count.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk_len: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync + Send,
    {
        let chunk_len = chunk_len.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items
                .par_chunks(chunk_len)
                .enumerate()
                .map(|(i, c)| f(i * chunk_len, c))
                .collect(),
            _ => items
                .chunks(chunk_len)
                .enumerate()
                .map(|(i, c)| f(i * chunk_len, c))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * x);
        let par = Execution::Parallel.map(&xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
    }

    #[test]
    fn chunks_carry_their_offset() {
        let xs: Vec<usize> = (0..10).collect();
        let starts = Execution::Parallel.map_chunks(&xs, 4, |start, c| (start, c.len()));
        assert_eq!(starts, vec![(0, 4), (4, 4), (8, 2)]);
    }
}
