//! Data-parallel map with a sequential fallback.
//!
//! Heavy inner loops (baseline tables, holdout evaluation, ablation cells)
//! funnel through [`map_indexed`]. With the `parallel` feature (default) it
//! fans out via rayon; without it the same closure runs on one thread.
//! Results are collected in index order either way, so outputs are identical
//! down to the bit and the feature flag never changes observable behavior.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to every index in `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let out = map_indexed(1000, |i| i * i);
        assert_eq!(out.len(), 1000);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }

    #[test]
    fn matches_sequential_reference() {
        let seq: Vec<f64> = (0..512).map(|i| (i as f64).sin().exp()).collect();
        let par = map_indexed(512, |i| (i as f64).sin().exp());
        assert_eq!(seq, par);
    }
}
