//! Benchmark drivers.
//!
//! Every driver validates a correctness oracle before any timing so a wrong
//! answer can never produce a timing row, runs its own message-passing
//! session, and returns [`BenchRecord`]s ready for CSV rendering. Timed
//! regions follow the repetition contract in [`csvout::time_reps`]: one
//! discarded warm-up, then at least five recorded repetitions.

use std::time::Instant;

use starkit_core::comm::{spawn_world, Communicator, ReduceOp};
use starkit_core::krylov::{solve, Method, Preconditioner, SolverConfig};
use starkit_core::krylov::batched::{solve_batched, solve_ensemble, BatchedMethod, BatchedSystem};
use starkit_core::lbfgs::{effective_bandwidth, Formulation, LbfgsState, ScaledIdentity};
use starkit_core::stream::{measure_submit_latency, StreamConfig, StreamWorld};
use starkit_core::vector::DistVector;
use starkit_core::{Layout, StarForest};
use starkit_core::sf::LeafSpec;

use crate::csvout::{time_reps, BenchRecord, MIN_REPS};
use crate::stencil::{assemble, seeded_value, StencilSpec};
use crate::{CliError, CliResult};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Common {
    pub ranks: usize,
    pub iters: usize,
    pub seed: u64,
}

fn latency_name(op: ReduceOp) -> &'static str {
    match op {
        ReduceOp::Replace => "sf-pingpong",
        ReduceOp::Sum => "sf-unpack",
    }
}

/// One-on-one forest latency: rank 0 owns `n` roots, rank 1 holds `n`
/// leaves onto them, and each iteration runs one broadcast and one
/// reduction, so one-way latency is elapsed over 2 x iters. `Replace`
/// transports values unchanged; `Sum` accumulates on both sides every
/// iteration, which prices the unpack arithmetic into the loop.
pub fn sf_latency(c: &Common, sizes: &[usize], op: ReduceOp) -> CliResult<Vec<BenchRecord>> {
    if c.ranks != 2 {
        return Err(CliError::Usage(format!(
            "{} is a two-rank round trip; pass --ranks 2",
            latency_name(op)
        )));
    }
    if c.iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let sizes = sizes.to_vec();
    let seed = c.seed;
    let iters = c.iters;
    // a short checked exchange per size, simulated entry by entry
    let oracle_iters = 16usize;
    let worlds = spawn_world(2, move |comm| {
        let mut records = Vec::new();
        let mut oracle_bad: Option<String> = None;
        for &n in &sizes {
            let sf = if comm.rank() == 0 {
                StarForest::setup(&comm, n, &[])?
            } else {
                let leaves: Vec<LeafSpec> = (0..n)
                    .map(|i| LeafSpec { leaf: i, root_rank: 0, root_offset: i })
                    .collect();
                StarForest::setup(&comm, 0, &leaves)?
            };
            let root_len = if comm.rank() == 0 { n } else { 0 };
            let leaf_len = if comm.rank() == 1 { n } else { 0 };

            let mut root: Vec<f64> =
                (0..root_len).map(|i| seeded_value(seed, i)).collect();
            let mut leaf: Vec<f64> =
                (0..leaf_len).map(|i| 0.25 * seeded_value(seed ^ 1, i)).collect();
            let mut sim_root: Vec<f64> = (0..n).map(|i| seeded_value(seed, i)).collect();
            let mut sim_leaf: Vec<f64> =
                (0..n).map(|i| 0.25 * seeded_value(seed ^ 1, i)).collect();
            for _ in 0..oracle_iters {
                sf.bcast(&root, &mut leaf, op)?;
                sf.reduce(&leaf, &mut root, op)?;
                for i in 0..n {
                    match op {
                        ReduceOp::Replace => {
                            sim_leaf[i] = sim_root[i];
                            // the round trip hands the same value back
                        }
                        ReduceOp::Sum => {
                            sim_leaf[i] += sim_root[i];
                            sim_root[i] += sim_leaf[i];
                        }
                    }
                }
            }
            let (data, sim): (&[f64], &[f64]) = if comm.rank() == 0 {
                (&root, &sim_root)
            } else {
                (&leaf, &sim_leaf)
            };
            for (i, (got, want)) in data.iter().zip(sim).enumerate() {
                if got.to_bits() != want.to_bits() && oracle_bad.is_none() {
                    oracle_bad = Some(format!(
                        "{} size {n}: rank {} entry {i} is {got}, sequential walk says {want}",
                        latency_name(op),
                        comm.rank()
                    ));
                }
            }

            // timing over zeroed buffers; both sides still write every entry
            // each iteration
            let mut root = vec![0.0; root_len];
            let mut leaf = vec![0.0; leaf_len];
            let mut err = None;
            let reps = time_reps(MIN_REPS, || {
                if err.is_some() {
                    return;
                }
                let mut run = || -> starkit_core::Result<()> {
                    comm.barrier()?;
                    for _ in 0..iters {
                        sf.bcast(&root, &mut leaf, op)?;
                        sf.reduce(&leaf, &mut root, op)?;
                    }
                    Ok(())
                };
                if let Err(e) = run() {
                    err = Some(e);
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            if comm.rank() == 0 {
                let min = reps.iter().copied().fold(f64::INFINITY, f64::min);
                let mean = reps.iter().sum::<f64>() / reps.len() as f64;
                let denom = (2 * iters) as f64;
                records.push(
                    BenchRecord::new(latency_name(op))
                        .param("size", n)
                        .param("iters", iters)
                        .metric("one_way_latency_s", format!("{:e}", min / denom))
                        .metric("one_way_latency_mean_s", format!("{:e}", mean / denom))
                        .with_reps(reps),
                );
            }
        }
        Ok((records, oracle_bad))
    })
    .map_err(CliError::Core)?;
    let mut records = Vec::new();
    for (recs, bad) in worlds {
        if let Some(msg) = bad {
            return Err(CliError::Oracle(msg));
        }
        records.extend(recs);
    }
    Ok(records)
}

/// Submission-latency analog of an empty-kernel launch benchmark: enqueue a
/// no-op task `iters` times, once draining only at the end and once
/// synchronizing after every submission.
pub fn launch_latency(c: &Common) -> CliResult<Vec<BenchRecord>> {
    if c.iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let comm = Communicator::solo();
    let world = StreamWorld::new(&comm, StreamConfig::default());
    let ctx = world.context();
    let mut records = Vec::new();
    for (mode, sync_each) in [("enqueue", false), ("sync-each", true)] {
        // sync-each prices a full drain into every submission; keep its
        // iteration count affordable while measuring the same thing
        let iters = if sync_each { c.iters.min(20_000) } else { c.iters };
        let before = world.stats().submitted;
        let mut reps = Vec::with_capacity(MIN_REPS);
        let mut err = None;
        for rep in 0..=MIN_REPS {
            match measure_submit_latency(&ctx, iters, sync_each) {
                Ok(d) if rep > 0 => reps.push(d.as_secs_f64()),
                Ok(_) => {}
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = err {
            return Err(CliError::Core(e));
        }
        let submitted = world.stats().submitted - before;
        if submitted != ((MIN_REPS + 1) * iters) as u64 {
            return Err(CliError::Oracle(format!(
                "launch-latency {mode}: expected {} submissions, stream counted {submitted}",
                (MIN_REPS + 1) * iters
            )));
        }
        if !reps.iter().all(|t| t.is_finite() && *t >= 0.0) {
            return Err(CliError::Oracle(format!("launch-latency {mode}: non-finite timing")));
        }
        records.push(
            BenchRecord::new("launch-latency")
                .param("mode", mode)
                .param("count", iters)
                .with_reps(reps),
        );
    }
    world.shutdown().map_err(CliError::Core)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOpts {
    pub dim: usize,
    pub wide: bool,
    pub extent: usize,
    pub method: Method,
    pub rtol: f64,
    pub max_it: usize,
    pub check_stride: usize,
}

/// Assembles a grid problem and times repeated solves from a zero guess.
/// The first solve is the oracle: its independently recomputed residual
/// must meet the tolerance before any repetition is timed.
pub fn solve_bench(c: &Common, o: &SolveOpts) -> CliResult<Vec<BenchRecord>> {
    if o.dim != 2 && o.dim != 3 {
        return Err(CliError::Usage(format!("--dim must be 2 or 3, got {}", o.dim)));
    }
    if o.extent < 2 {
        return Err(CliError::Usage("--extent must be at least 2".into()));
    }
    if matches!(o.method, Method::TfqmrBatched | Method::BicgBatched) {
        return Err(CliError::Usage(
            "batched methods run under batch-bench, not solve".into(),
        ));
    }
    let spec = StencilSpec { dim: o.dim, wide: o.wide, extent: o.extent };
    let o = *o;
    let c = *c;
    let worlds = spawn_world(c.ranks, move |comm| {
        let prob = assemble(&comm, spec, c.seed)?;
        let mut a = prob.a;
        let mut b = prob.b;
        let is_async = matches!(o.method, Method::CgAsync | Method::TfqmrAsync);
        let world = if is_async {
            let w = StreamWorld::new(&comm, StreamConfig::default());
            a.register_with(&w)?;
            b.register_with(&w)?;
            Some(w)
        } else {
            None
        };
        let mut x = b.duplicate();
        let cfg = SolverConfig {
            method: o.method,
            rtol: o.rtol,
            max_it: o.max_it,
            check_stride: o.check_stride,
            pc: Preconditioner::None,
        };
        let report = solve(&a, &b, &mut x, &cfg)?;

        let mut err = None;
        let reps = time_reps(MIN_REPS, || {
            if err.is_some() {
                return;
            }
            let mut run = || -> starkit_core::Result<()> {
                comm.barrier()?;
                x.set_all(0.0)?;
                solve(&a, &b, &mut x, &cfg)?;
                Ok(())
            };
            if let Err(e) = run() {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let nnz = comm.allreduce_sum(&[a.local_nnz() as f64])?[0] as u64;
        if let Some(w) = world {
            w.shutdown()?;
        }
        let record = if comm.rank() == 0 {
            Some(
                BenchRecord::new("solve")
                    .param("dim", o.dim)
                    .param("wide", o.wide)
                    .param("extent", o.extent)
                    .param("n", spec.n())
                    .param("nnz", nnz)
                    .param("method", method_name(o.method))
                    .param("rtol", format!("{:e}", o.rtol))
                    .param("check_stride", o.check_stride)
                    .param("ranks", c.ranks)
                    .metric("iterations", report.iterations)
                    .metric("final_relres", format!("{:e}", report.final_relres))
                    .metric("sync_points", report.sync_points)
                    .metric("reductions", report.reductions)
                    .with_reps(reps),
            )
        } else {
            None
        };
        Ok((record, report.converged, report.final_relres))
    })
    .map_err(CliError::Core)?;
    let mut records = Vec::new();
    for (record, converged, relres) in worlds {
        if !converged || !(relres <= o.rtol) {
            return Err(CliError::Oracle(format!(
                "solve did not reach rtol {:e}: converged = {converged}, recomputed relres = {relres:e}",
                o.rtol
            )));
        }
        records.extend(record);
    }
    Ok(records)
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Cg => "cg",
        Method::CgAsync => "cg-async",
        Method::Tfqmr => "tfqmr",
        Method::TfqmrAsync => "tfqmr-async",
        Method::TfqmrBatched => "tfqmr-batched",
        Method::BicgBatched => "bicg-batched",
    }
}

#[derive(Debug, Clone)]
pub struct BatchOpts {
    pub lanes: Vec<usize>,
    pub block: usize,
    pub method: BatchedMethod,
    pub rtol: f64,
}

/// Builds a banded, diagonally dominant batch with per-lane values, where
/// lane conditioning spreads from mild to harsh across the batch.
pub fn build_batch(seed: u64, n: usize, lanes: usize) -> BatchedSystem {
    let band = 2usize;
    let mut rowptr = vec![0usize];
    let mut cols = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(band);
        let hi = (i + band).min(n - 1);
        for j in lo..=hi {
            cols.push(j);
        }
        rowptr.push(cols.len());
    }
    let nnz = cols.len();
    let mut vals = vec![0.0; nnz * lanes];
    let mut rhs = vec![0.0; n * lanes];
    for l in 0..lanes {
        // off-diagonals first, then a dominant diagonal on top of their sum
        let mut rowsum = vec![0.0; n];
        for i in 0..n {
            for p in rowptr[i]..rowptr[i + 1] {
                let j = cols[p];
                if j != i {
                    let v = seeded_value(seed ^ 0x0ff0, p * lanes + l);
                    vals[p * lanes + l] = v;
                    rowsum[i] += v.abs();
                }
            }
        }
        let spread = 1.0 + 9.0 * l as f64 / lanes.max(2) as f64;
        for i in 0..n {
            for p in rowptr[i]..rowptr[i + 1] {
                if cols[p] == i {
                    vals[p * lanes + l] = spread * (rowsum[i] + 1.0);
                }
            }
            rhs[i * lanes + l] = seeded_value(seed ^ 0xbeef, i * lanes + l);
        }
    }
    BatchedSystem::new(n, lanes, rowptr, cols, vals, rhs).expect("valid batch shape")
}

/// Lockstep-batch versus stacked-ensemble throughput over a lane-count
/// sweep. Rank local: small systems never cross the fabric.
pub fn batch_bench(c: &Common, o: &BatchOpts) -> CliResult<Vec<BenchRecord>> {
    if o.block < 2 {
        return Err(CliError::Usage("--block must be at least 2".into()));
    }
    if o.lanes.is_empty() || o.lanes.contains(&0) {
        return Err(CliError::Usage("--lanes needs a list of positive lane counts".into()));
    }
    let cfg = SolverConfig {
        rtol: o.rtol,
        max_it: 20 * o.block,
        ..SolverConfig::new(match o.method {
            BatchedMethod::Tfqmr => Method::TfqmrBatched,
            BatchedMethod::Bicg => Method::BicgBatched,
        })
    };
    let mut records = Vec::new();
    for &lanes in &o.lanes {
        let mut sys = build_batch(c.seed, o.block, lanes);
        let reports = solve_batched(&mut sys, o.method, &cfg).map_err(CliError::Core)?;
        for (l, rep) in reports.iter().enumerate() {
            if !rep.converged {
                return Err(CliError::Oracle(format!(
                    "batch lane {l} of {lanes} failed: relres {:e}{}",
                    rep.final_relres,
                    rep.breakdown.as_deref().map(|b| format!(", {b}")).unwrap_or_default()
                )));
            }
        }
        let max_lane_iters = reports.iter().map(|r| r.iterations).max().unwrap_or(0);

        let mut err = None;
        let reps_batched = time_reps(MIN_REPS, || {
            if err.is_some() {
                return;
            }
            sys.x.fill(0.0);
            if let Err(e) = solve_batched(&mut sys, o.method, &cfg) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(CliError::Core(e));
        }

        let mut ens_sys = build_batch(c.seed, o.block, lanes);
        let ens_report = solve_ensemble(&mut ens_sys, o.method, &cfg).map_err(CliError::Core)?;
        if !ens_report.converged {
            return Err(CliError::Oracle(format!(
                "ensemble of {lanes} lanes failed: relres {:e}",
                ens_report.final_relres
            )));
        }
        let mut err = None;
        let reps_ensemble = time_reps(MIN_REPS, || {
            if err.is_some() {
                return;
            }
            ens_sys.x.fill(0.0);
            if let Err(e) = solve_ensemble(&mut ens_sys, o.method, &cfg) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(CliError::Core(e));
        }

        for (mode, reps, iters) in [
            ("batched", reps_batched, max_lane_iters),
            ("ensemble", reps_ensemble, ens_report.iterations),
        ] {
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            records.push(
                BenchRecord::new("batch-bench")
                    .param("lanes", lanes)
                    .param("block", o.block)
                    .param("method", batched_name(o.method))
                    .param("mode", mode)
                    .metric("solves_per_s", format!("{:e}", lanes as f64 / mean))
                    .metric("iterations", iters)
                    .with_reps(reps),
            );
        }
    }
    Ok(records)
}

pub fn batched_name(m: BatchedMethod) -> &'static str {
    match m {
        BatchedMethod::Tfqmr => "tfqmr-batched",
        BatchedMethod::Bicg => "bicg-batched",
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOpts {
    pub sizes: Vec<usize>,
    pub histories: Vec<usize>,
    pub formulations: Vec<Formulation>,
    /// Update/apply cycles per repetition.
    pub cycles: usize,
}

pub fn formulation_name(f: Formulation) -> &'static str {
    match f {
        Formulation::Recursive => "recursive",
        Formulation::CompactDense => "compact-dense",
        Formulation::IntermediateDense => "intermediate-dense",
    }
}

/// A deterministic positive-curvature pair over the given layout range.
fn curved_pair(
    comm: &Communicator,
    layout: &Layout,
    seed: u64,
) -> starkit_core::Result<(DistVector, DistVector)> {
    let range = layout.range(comm.rank());
    let s: Vec<f64> = range.clone().map(|i| seeded_value(seed, i)).collect();
    let y: Vec<f64> = range
        .clone()
        .zip(&s)
        .map(|(i, sv)| 2.0 * sv + 0.2 * seeded_value(seed ^ 0x5ca1e, i))
        .collect();
    Ok((
        DistVector::from_local(comm, layout.clone(), s)?,
        DistVector::from_local(comm, layout.clone(), y)?,
    ))
}

/// Effective-bandwidth sweep: per (n, m, formulation), time `cycles`
/// update/apply rounds at a full history and derive
/// B_e = n(2m+2)/(t_update + t_solve) per cycle.
pub fn lbfgs_bench(c: &Common, o: &LbfgsOpts) -> CliResult<Vec<BenchRecord>> {
    if o.sizes.is_empty() || o.histories.is_empty() || o.formulations.is_empty() {
        return Err(CliError::Usage(
            "--sizes, --histories, and --formulation all need at least one entry".into(),
        ));
    }
    if o.histories.contains(&0) {
        return Err(CliError::Usage("history capacity must be at least 1".into()));
    }
    if o.cycles == 0 {
        return Err(CliError::Usage("--cycles must be at least 1".into()));
    }
    let mut records = Vec::new();
    for &n in &o.sizes {
        for &m in &o.histories {
            if m >= n {
                return Err(CliError::Usage(format!(
                    "history capacity {m} must stay below the problem size {n}"
                )));
            }
            let o = o.clone();
            let c = *c;
            let worlds = spawn_world(c.ranks, move |comm| {
                let layout = Layout::split_even(n, comm.size());
                let mut fill = Vec::with_capacity(m);
                for t in 0..m {
                    fill.push(curved_pair(&comm, &layout, c.seed ^ (t as u64) << 8)?);
                }
                let cycle_pairs: Vec<_> = (0..o.cycles)
                    .map(|t| curved_pair(&comm, &layout, c.seed ^ 0xabcd ^ ((t as u64) << 8)))
                    .collect::<starkit_core::Result<_>>()?;
                let probe = {
                    let range = layout.range(comm.rank());
                    DistVector::from_local(
                        &comm,
                        layout.clone(),
                        range.map(|i| seeded_value(c.seed ^ 0x9e0be, i)).collect(),
                    )?
                };

                // oracle: at an identical full history, the three
                // formulations must agree on the probe direction
                let mut oracle_bad = None;
                let mut outputs = Vec::new();
                for f in
                    [Formulation::Recursive, Formulation::CompactDense, Formulation::IntermediateDense]
                {
                    let mut st = LbfgsState::new(m, ScaledIdentity(0.5))?;
                    for (s, y) in &fill {
                        if !st.update(s, y)? {
                            return Err(starkit_core::Error::DegenerateHistory(
                                "generated pair failed the curvature gate".into(),
                            ));
                        }
                    }
                    outputs.push(st.apply(&probe, f)?.gather()?);
                }
                let scale = outputs[0].iter().map(|v| v.abs()).fold(1e-300, f64::max);
                for f in 1..outputs.len() {
                    for (i, (got, want)) in outputs[f].iter().zip(&outputs[0]).enumerate() {
                        if (got - want).abs() > 1e-8 * scale && oracle_bad.is_none() {
                            oracle_bad = Some(format!(
                                "lbfgs formulations disagree at n={n} m={m} entry {i}: {got} vs {want}"
                            ));
                        }
                    }
                }

                let mut recs = Vec::new();
                for &f in &o.formulations {
                    let mut st = LbfgsState::new(m, ScaledIdentity(0.5))?;
                    for (s, y) in &fill {
                        st.update(s, y)?;
                    }
                    let mut totals = Vec::with_capacity(MIN_REPS);
                    let mut updates = Vec::with_capacity(MIN_REPS);
                    let mut applies = Vec::with_capacity(MIN_REPS);
                    for rep in 0..=MIN_REPS {
                        comm.barrier()?;
                        let mut tu = 0.0;
                        let mut ta = 0.0;
                        for (s, y) in &cycle_pairs {
                            let t0 = Instant::now();
                            st.update(s, y)?;
                            tu += t0.elapsed().as_secs_f64();
                            let t1 = Instant::now();
                            let _ = st.apply(&probe, f)?;
                            ta += t1.elapsed().as_secs_f64();
                        }
                        if rep > 0 {
                            totals.push(tu + ta);
                            updates.push(tu);
                            applies.push(ta);
                        }
                    }
                    if comm.rank() == 0 {
                        let cyc = o.cycles as f64;
                        let upd_min =
                            updates.iter().copied().fold(f64::INFINITY, f64::min) / cyc;
                        let app_min =
                            applies.iter().copied().fold(f64::INFINITY, f64::min) / cyc;
                        let upd_mean =
                            updates.iter().sum::<f64>() / updates.len() as f64 / cyc;
                        let app_mean =
                            applies.iter().sum::<f64>() / applies.len() as f64 / cyc;
                        let be = effective_bandwidth(n, m, upd_min, app_min)?;
                        recs.push(
                            BenchRecord::new("lbfgs-bench")
                                .param("n", n)
                                .param("m", m)
                                .param("formulation", formulation_name(f))
                                .param("cycles", o.cycles)
                                .param("ranks", c.ranks)
                                .metric("t_update_s", format!("{upd_min:e}"))
                                .metric("t_apply_s", format!("{app_min:e}"))
                                .metric("t_update_mean_s", format!("{upd_mean:e}"))
                                .metric("t_apply_mean_s", format!("{app_mean:e}"))
                                .metric("be_elems_per_s", format!("{be:e}"))
                                .metric("be_bytes_per_s", format!("{:e}", be * 8.0))
                                .with_reps(totals),
                        );
                    }
                }
                Ok((recs, oracle_bad))
            })
            .map_err(CliError::Core)?;
            for (recs, bad) in worlds {
                if let Some(msg) = bad {
                    return Err(CliError::Oracle(msg));
                }
                records.extend(recs);
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(ranks: usize, iters: usize) -> Common {
        Common { ranks, iters, seed: 7 }
    }

    #[test]
    fn pingpong_requires_two_ranks() {
        let err = sf_latency(&common(3, 10), &[4], ReduceOp::Replace).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn latency_records_cover_each_size_including_empty_messages() {
        for op in [ReduceOp::Replace, ReduceOp::Sum] {
            let records = sf_latency(&common(2, 8), &[0, 3], op).unwrap();
            assert_eq!(records.len(), 2);
            assert_eq!(records[0].param_value("size"), Some("0"));
            assert_eq!(records[1].param_value("size"), Some("3"));
            for r in &records {
                assert!(r.metric_f64("one_way_latency_s").unwrap() > 0.0);
                assert_eq!(r.reps.len(), MIN_REPS);
            }
        }
    }

    #[test]
    fn launch_latency_emits_both_modes() {
        let records = launch_latency(&common(1, 500)).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].param_value("mode"), Some("enqueue"));
        assert_eq!(records[1].param_value("mode"), Some("sync-each"));
    }

    #[test]
    fn solve_bench_times_a_converged_solve_only() {
        let o = SolveOpts {
            dim: 2,
            wide: false,
            extent: 6,
            method: Method::Cg,
            rtol: 1e-10,
            max_it: 500,
            check_stride: 1,
        };
        let records = solve_bench(&common(2, 1), &o).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.param_value("n"), Some("36"));
        assert!(r.metric_f64("final_relres").unwrap() <= 1e-10);
        assert!(r.metric_f64("iterations").unwrap() >= 1.0);

        // an unreachable tolerance must be reported as an oracle failure
        let hopeless = SolveOpts { rtol: 1e-30, max_it: 3, ..o };
        assert!(matches!(
            solve_bench(&common(1, 1), &hopeless),
            Err(CliError::Oracle(_))
        ));
    }

    #[test]
    fn batch_bench_reports_batched_and_ensemble_rows() {
        let o = BatchOpts {
            lanes: vec![1, 4],
            block: 8,
            method: BatchedMethod::Tfqmr,
            rtol: 1e-10,
        };
        let records = batch_bench(&common(1, 1), &o).unwrap();
        assert_eq!(records.len(), 4);
        let modes: Vec<_> =
            records.iter().map(|r| r.param_value("mode").unwrap().to_string()).collect();
        assert_eq!(modes, vec!["batched", "ensemble", "batched", "ensemble"]);
        for r in &records {
            assert!(r.metric_f64("solves_per_s").unwrap() > 0.0);
        }
    }

    #[test]
    fn lbfgs_bench_emits_bandwidth_metrics() {
        let o = LbfgsOpts {
            sizes: vec![64],
            histories: vec![3],
            formulations: vec![Formulation::IntermediateDense],
            cycles: 4,
        };
        let records = lbfgs_bench(&common(2, 1), &o).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        let be = r.metric_f64("be_elems_per_s").unwrap();
        let tu = r.metric_f64("t_update_s").unwrap();
        let ta = r.metric_f64("t_apply_s").unwrap();
        assert!(be > 0.0 && tu > 0.0 && ta > 0.0);
        assert_eq!(r.param_value("formulation"), Some("intermediate-dense"));
    }

    #[test]
    fn generated_batches_have_spread_conditioning() {
        let sys = build_batch(3, 8, 4);
        let a0 = sys.lane_system(0);
        let a3 = sys.lane_system(3);
        assert_eq!(a0.0, a3.0, "shared sparsity");
        assert_ne!(a0.2, a3.2, "per-lane values");
    }
}
