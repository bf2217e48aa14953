//! Wall-clock forward-pass timing with warmup, reporting mean and p95.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LatencySummary;
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::model::SdniaModel;

/// Times `n_runs` calls of `f` after `n_warmup` unrecorded calls.
pub fn measure<F: FnMut() -> Result<()>>(
    mut f: F,
    input_size: usize,
    n_warmup: usize,
    n_runs: usize,
) -> Result<LatencySummary> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
    }
    for _ in 0..n_warmup {
        f()?;
    }
    let mut times_ms = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        f()?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times_ms.iter().sum::<f64>() / n_runs as f64;
    let mut sorted = times_ms;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let p95_idx = ((n_runs as f64 * 0.95).ceil() as usize).saturating_sub(1);
    Ok(LatencySummary {
        input_size,
        mean_ms,
        p95_ms: sorted[p95_idx],
        runs: n_runs,
    })
}

/// Forward-pass latency of the full model (adaptation + detection) at a
/// square input size.
pub fn measure_forward(
    model: &SdniaModel,
    input_size: usize,
    n_warmup: usize,
    n_runs: usize,
) -> Result<LatencySummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x71_AE);
    let image = ImageTensor::random(input_size, input_size, &mut rng);
    measure(
        || model.infer(&image).map(|_| ()),
        input_size,
        n_warmup,
        n_runs,
    )
}

/// Full-pipeline vs detector-only timing; the difference is the adaptation
/// overhead (hardware-dependent, reported for information).
#[derive(Debug, Clone, Copy)]
pub struct LatencyComparison {
    pub full: LatencySummary,
    pub detector_only: LatencySummary,
    pub adaptation_overhead_ms: f64,
}

pub fn compare_latency(
    model: &SdniaModel,
    input_size: usize,
    n_warmup: usize,
    n_runs: usize,
) -> Result<LatencyComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x71_AE);
    let image = ImageTensor::random(input_size, input_size, &mut rng);
    let full = measure(
        || model.infer(&image).map(|_| ()),
        input_size,
        n_warmup,
        n_runs,
    )?;
    let detector_only = measure(
        || model.detector.forward(&image).map(|_| ()),
        input_size,
        n_warmup,
        n_runs,
    )?;
    Ok(LatencyComparison {
        full,
        detector_only,
        adaptation_overhead_ms: full.mean_ms - detector_only.mean_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_p95_equals_mean() {
        let s = measure(|| Ok(()), 0, 0, 1).unwrap();
        assert_eq!(s.mean_ms, s.p95_ms);
        assert_eq!(s.runs, 1);
    }

    #[test]
    fn zero_runs_rejected() {
        assert!(measure(|| Ok(()), 0, 0, 0).is_err());
    }

    #[test]
    fn timing_captures_work() {
        let s = measure(
            || {
                std::thread::sleep(std::time::Duration::from_millis(2));
                Ok(())
            },
            0,
            1,
            3,
        )
        .unwrap();
        assert!(s.mean_ms >= 1.5, "mean {} ms", s.mean_ms);
        assert!(s.p95_ms >= s.mean_ms * 0.5);
    }
}
