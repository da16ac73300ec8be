#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are scheduled.
///
/// Results never depend on the mode: every parallel map collects in index
/// order and all reductions happen afterwards, sequentially.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// `true` when this mode will actually fan out to a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Evaluates `f(0..len)` and collects the results in index order.
    pub fn map_indexed<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            return (0..len).into_par_iter().map(f).collect();
        }
        (0..len).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        let a = Execution::Parallel.map_indexed(1000, f);
        let b = Execution::Sequential.map_indexed(1000, f);
        assert_eq!(a, b);
    }
}
