//! Benchmark records and their CSV rendering.
//!
//! Schema (version 1): one row per benchmark configuration with columns
//!   schema_version, benchmark, params, reps, mean_s, min_s, p50_s, metrics
//! where `params` and `metrics` are semicolon-joined key=value lists and
//! the timing columns are seconds over the recorded repetitions. Latency
//! benchmarks conventionally report the minimum, so it sits next to the
//! mean in every row. A plain-text `.meta` sidecar records the seed, the
//! full flag set, and the worker count of the run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const SCHEMA_VERSION: u32 = 1;

/// Fewest timed repetitions a record may carry.
pub const MIN_REPS: usize = 5;

/// One benchmark configuration with per-repetition timings in seconds.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub benchmark: String,
    pub params: Vec<(String, String)>,
    pub metrics: Vec<(String, String)>,
    pub reps: Vec<f64>,
}

impl BenchRecord {
    pub fn new(benchmark: impl Into<String>) -> BenchRecord {
        BenchRecord {
            benchmark: benchmark.into(),
            params: Vec::new(),
            metrics: Vec::new(),
            reps: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Display) -> BenchRecord {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn metric(mut self, key: &str, value: impl Display) -> BenchRecord {
        self.metrics.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_reps(mut self, reps: Vec<f64>) -> BenchRecord {
        assert!(reps.len() >= MIN_REPS, "a record needs at least {MIN_REPS} repetitions");
        self.reps = reps;
        self
    }

    pub fn metric_f64(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).and_then(|(_, v)| v.parse().ok())
    }

    pub fn param_value(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn mean(&self) -> f64 {
        self.reps.iter().sum::<f64>() / self.reps.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.reps.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn p50(&self) -> f64 {
        let mut sorted = self.reps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = sorted.len() / 2;
        if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        }
    }
}

/// Times `f` over `reps.max(MIN_REPS)` repetitions after one discarded
/// warm-up call, returning per-repetition seconds.
pub fn time_reps(reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    let reps = reps.max(MIN_REPS);
    f();
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect()
}

fn join_kv(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| {
            debug_assert!(!k.contains([',', ';', '=']) && !v.contains([',', ';', '=']));
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn render_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("schema_version,benchmark,params,reps,mean_s,min_s,p50_s,metrics\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:e},{:e},{:e},{}\n",
            SCHEMA_VERSION,
            r.benchmark,
            join_kv(&r.params),
            r.reps.len(),
            r.mean(),
            r.min(),
            r.p50(),
            join_kv(&r.metrics),
        ));
    }
    out
}

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> std::io::Result<()> {
    std::fs::write(path, render_csv(records))
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    csv.with_file_name(name)
}

pub fn write_sidecar(csv: &Path, seed: u64, ranks: usize, flags: &str) -> std::io::Result<()> {
    let body = format!(
        "schema_version = {SCHEMA_VERSION}\nseed = {seed}\nranks = {ranks}\nflags = {flags}\n"
    );
    std::fs::write(sidecar_path(csv), body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_cover_the_usual_cases() {
        let r = BenchRecord::new("x").with_reps(vec![4.0, 1.0, 2.0, 8.0, 5.0]);
        assert_eq!(r.mean(), 4.0);
        assert_eq!(r.min(), 1.0);
        assert_eq!(r.p50(), 4.0);
        let even = BenchRecord::new("x").with_reps(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(even.p50(), 3.5);
    }

    #[test]
    #[should_panic(expected = "at least 5 repetitions")]
    fn too_few_repetitions_are_refused() {
        let _ = BenchRecord::new("x").with_reps(vec![1.0; 4]);
    }

    #[test]
    fn timing_always_runs_the_minimum_repetitions() {
        let mut calls = 0;
        let reps = time_reps(1, || calls += 1);
        assert_eq!(reps.len(), MIN_REPS);
        // warm-up plus the timed repetitions
        assert_eq!(calls, MIN_REPS + 1);
    }

    #[test]
    fn rendered_rows_carry_the_schema_version() {
        let r = BenchRecord::new("demo")
            .param("n", 4)
            .param("mode", "fast")
            .metric("latency_s", 0.5)
            .with_reps(vec![1.0; 5]);
        let csv = render_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "schema_version,benchmark,params,reps,mean_s,min_s,p50_s,metrics"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with(&format!("{SCHEMA_VERSION},demo,n=4;mode=fast,5,")));
        assert!(row.ends_with("latency_s=0.5"));
    }

    #[test]
    fn sidecar_sits_next_to_the_csv() {
        let p = sidecar_path(Path::new("/tmp/out/run.csv"));
        assert_eq!(p, Path::new("/tmp/out/run.csv.meta"));
    }
}
