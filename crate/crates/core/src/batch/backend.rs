use std::thread;

use serde::{Deserialize, Serialize};

/// Where element-wise kernels run.
///
/// `Parallel` splits the index range into contiguous chunks of
/// `ceil(count / workers)` elements, one scoped thread per chunk. There is no
/// work stealing, so the schedule is a pure function of `count` and `workers`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ExecutionBackend {
    #[default]
    Naive,
    Parallel { workers: usize },
}

impl ExecutionBackend {
    pub fn parallel(workers: usize) -> Self {
        ExecutionBackend::Parallel {
            workers: workers.max(1),
        }
    }

    /// Parallel backend sized to the machine.
    pub fn parallel_auto() -> Self {
        let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self::parallel(workers.max(4))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExecutionBackend::Naive => "naive",
            ExecutionBackend::Parallel { .. } => "parallel",
        }
    }

    pub fn workers(&self) -> usize {
        match *self {
            ExecutionBackend::Naive => 1,
            ExecutionBackend::Parallel { workers } => workers.max(1),
        }
    }

    /// Evaluates `f(0..count)` and returns the results in index order, or the
    /// error of the lowest failing index.
    pub fn try_map<T, E, F>(&self, count: usize, f: F) -> Result<Vec<T>, (usize, E)>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync,
    {
        let workers = self.workers();
        if workers == 1 || count < 2 {
            return (0..count).map(|i| f(i).map_err(|e| (i, e))).collect();
        }
        let chunk = count.div_ceil(workers);
        let f = &f;
        thread::scope(|scope| {
            let handles: Vec<_> = (0..count)
                .step_by(chunk)
                .map(|start| {
                    let end = (start + chunk).min(count);
                    scope.spawn(move || {
                        (start..end)
                            .map(|i| f(i).map_err(|e| (i, e)))
                            .collect::<Result<Vec<T>, (usize, E)>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(count);
            let mut first_err = None;
            for h in handles {
                match h.join().expect("worker panicked") {
                    Ok(part) if first_err.is_none() => out.extend(part),
                    Ok(_) => {}
                    Err(e) => {
                        if first_err.is_none() {
                            first_err = Some(e);
                        }
                    }
                }
            }
            match first_err {
                Some(e) => Err(e),
                None => Ok(out),
            }
        })
    }

    pub fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        match self.try_map::<T, std::convert::Infallible, _>(count, |i| Ok(f(i))) {
            Ok(v) => v,
            Err((_, never)) => match never {},
        }
    }

    /// Pairwise tree reduction of every group under the associative,
    /// commutative `op`. Empty groups yield `identity`.
    ///
    /// Each level combines neighbours `(2i, 2i+1)` of every group at once, so
    /// the tree shape depends only on group lengths.
    pub fn reduce_groups<T, F>(&self, mut groups: Vec<Vec<T>>, identity: T, op: F) -> Vec<T>
    where
        T: Clone + Send + Sync,
        F: Fn(&T, &T) -> T + Sync,
    {
        while groups.iter().any(|g| g.len() > 1) {
            // (group, left index) for every pair at this level
            let tasks: Vec<(usize, usize)> = groups
                .iter()
                .enumerate()
                .flat_map(|(g, items)| (0..items.len() / 2).map(move |p| (g, 2 * p)))
                .collect();
            let products = {
                let groups = &groups;
                let tasks = &tasks;
                self.map(tasks.len(), |t| {
                    let (g, i) = tasks[t];
                    op(&groups[g][i], &groups[g][i + 1])
                })
            };
            let mut products = products.into_iter();
            groups = groups
                .into_iter()
                .map(|items| {
                    let odd = items.len() % 2 == 1;
                    let mut next: Vec<T> = products.by_ref().take(items.len() / 2).collect();
                    if odd {
                        next.push(items.last().expect("odd length").clone());
                    }
                    next
                })
                .collect();
        }
        groups
            .into_iter()
            .map(|g| g.into_iter().next().unwrap_or_else(|| identity.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn map_preserves_order() {
        for backend in [ExecutionBackend::Naive, ExecutionBackend::parallel(3), ExecutionBackend::parallel(16)] {
            assert_eq!(backend.map(10, |i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
            assert!(backend.map(0, |i| i).is_empty());
        }
    }

    #[test]
    fn try_map_reports_lowest_failing_index() {
        let backend = ExecutionBackend::parallel(4);
        let r: Result<Vec<usize>, (usize, &str)> =
            backend.try_map(100, |i| if i == 30 || i == 80 { Err("bad") } else { Ok(i) });
        assert_eq!(r.unwrap_err().0, 30);
    }

    #[test]
    fn reduce_handles_empty_and_singleton_groups() {
        let backend = ExecutionBackend::parallel(2);
        let out = backend.reduce_groups(vec![vec![], vec![5u64], vec![1, 2, 3]], 0, |a, b| a + b);
        assert_eq!(out, vec![0, 5, 6]);
    }

    #[test]
    fn names() {
        assert_eq!(ExecutionBackend::Naive.name(), "naive");
        assert_eq!(ExecutionBackend::parallel(0).workers(), 1);
        assert_eq!(serde_json::to_string(&ExecutionBackend::parallel(4)).unwrap(), r#"{"name":"parallel","workers":4}"#);
    }

    proptest! {
        #[test]
        fn reduction_matches_sequential_fold(groups in prop::collection::vec(prop::collection::vec(0u64..1000, 0..40), 0..6), workers in 1usize..9) {
            let expected: Vec<u64> = groups.iter().map(|g| g.iter().sum()).collect();
            let got = ExecutionBackend::parallel(workers).reduce_groups(groups, 0, |a, b| a + b);
            prop_assert_eq!(got, expected);
        }
    }
}
