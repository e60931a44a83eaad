//! Execution-mode switch for data-parallel inner loops.
//!
//! Per-example forward/backward passes, decoding, and metric computation are
//! embarrassingly parallel across examples. `map_indexed` runs them either
//! sequentially or on the rayon pool; results always come back in input
//! order, so the two modes are numerically identical — reductions downstream
//! see the same operands in the same order.

/// How to run per-example work inside a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl ExecMode {
    /// Parallel when the feature is compiled in, sequential otherwise.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            ExecMode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            ExecMode::Sequential
        }
    }

    pub fn from_flag(sequential: bool) -> Self {
        if sequential {
            ExecMode::Sequential
        } else {
            Self::auto()
        }
    }
}

/// Map `f` over `items`, preserving order of results.
pub fn map_indexed<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
    }
}
