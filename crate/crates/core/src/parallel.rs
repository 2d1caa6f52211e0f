//! Order-preserving maps over independent work items.
//!
//! With the `parallel` feature, [`Execution::Parallel`] spreads items over
//! the rayon pool; without it, it runs sequentially. Results always come
//! back in input order, so downstream reductions are deterministic.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Self::Parallel
        } else {
            Self::Sequential
        }
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// `items.iter().enumerate().map(f)` collected in input order.
pub fn map_items<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    map_range(exec, items.len(), |i| f(i, &items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..100).collect();
        let a = map_items(Execution::Sequential, &items, |i, &x| x * x + i as u64);
        let b = map_items(Execution::Parallel, &items, |i, &x| x * x + i as u64);
        assert_eq!(a, b);
        assert_eq!(a[7], 56);
    }
}
