//! Order-preserving batch execution.

/// How batch work is spread over threads. `Parallel` falls back to
/// sequential when the crate is built without the `parallel` feature.
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
    /// Apply `f` to every item; results come back in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Map each item, then fold the results with an associative `merge`.
    pub fn map_reduce<T, R, F, M>(self, items: &[T], identity: R, f: F, merge: M) -> R
    where
        T: Sync,
        R: Send + Clone + Sync,
        F: Fn(&T) -> R + Sync + Send,
        M: Fn(R, R) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).reduce(|| identity.clone(), &merge)
            }
            _ => items.iter().map(f).fold(identity, merge),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&v, |x| x * x);
        let par = Execution::Parallel.map(&v, |x| x * x);
        assert_eq!(seq, par);
        let s = Execution::Parallel.map_reduce(&v, 0u64, |&x| x, |a, b| a + b);
        assert_eq!(s, 999 * 1000 / 2);
    }
}
