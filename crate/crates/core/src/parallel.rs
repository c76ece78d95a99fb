//! Row-chunked data parallelism with deterministic output placement.
//!
//! Every row is computed independently of how rows are grouped, so serial
//! and parallel evaluation agree bit for bit. `EPT_THREADS` caps the worker
//! count; `EPT_THREADS=1` forces serial evaluation.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Rows handed to one worker at a time.
pub const CHUNK_ROWS: usize = 1024;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Worker count from `EPT_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("EPT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = thread_count();
        if n <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
    })
    .as_ref()
}

/// Apply `f` to consecutive row blocks of `xs` and stack the results.
pub fn map_row_chunks<F>(xs: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let n = xs.nrows();
    if n <= CHUNK_ROWS {
        return f(xs);
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let run = |s: &usize| f(&xs.slice_rows(*s, (*s + CHUNK_ROWS).min(n)));
    let parts: Vec<Tensor> = match pool() {
        Some(p) => p.install(|| starts.par_iter().map(run).collect::<Result<_>>())?,
        None => starts.iter().map(run).collect::<Result<_>>()?,
    };
    let refs: Vec<&Tensor> = parts.iter().collect();
    let out = Tensor::vstack(&refs)?;
    if out.nrows() != n {
        return Err(shape_err("chunked map changed the row count"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_preserves_order() {
        let n = 3 * CHUNK_ROWS + 17;
        let xs = Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let out = map_row_chunks(&xs, |c| Ok(c.map(|v| v * 2.0))).unwrap();
        assert_eq!(out, xs.map(|v| v * 2.0));
    }
}
