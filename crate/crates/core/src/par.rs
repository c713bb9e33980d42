//! Order-preserving map over a slice, on rayon or sequentially.

/// Requested execution mode. `Parallel` only runs on rayon when the crate is
/// built with the `parallel` feature; otherwise it falls back to `Serial`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f` to every item and returns results in input order.
pub fn map<T, R, F>(execution: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if execution.is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    let _ = execution;
    items.iter().enumerate().map(|(i, item)| f(i, item)).collect()
}
