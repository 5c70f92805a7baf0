//! Random task programs and their sequential-replay oracle.
//!
//! A program is a list of submit/fork/join operations over a set of shared
//! numeric cells. Executed on a stream engine the tasks may run in any
//! interleaving the dependency tracker allows; replayed one op at a time they
//! define the reference outcome. A correct engine produces exactly the
//! replay result because ticket order is its serialization witness.

use std::sync::{Arc, Mutex};

use rand::Rng;
use starkit_core::{next_object_id, AccessMode, DeviceContext, StreamWorld};

#[derive(Debug, Clone)]
pub enum ProgOp {
    /// Run a task on `ctx`: read the listed cells, then fold the sum into
    /// each written cell.
    Submit { ctx: usize, reads: Vec<usize>, writes: Vec<usize> },
    /// Split `n` child queues off `parent`; ids are assigned sequentially.
    Fork { parent: usize, n: usize },
    /// Merge one child queue back into `parent`.
    Join { parent: usize, child: usize },
}

#[derive(Debug, Clone)]
pub struct Program {
    pub ncells: usize,
    pub ops: Vec<ProgOp>,
}

fn op_constant(idx: usize) -> f64 {
    0.25 * (idx as f64 + 1.0)
}

fn initial_cell(i: usize) -> f64 {
    i as f64 + 1.0
}

/// Task semantics shared by the real run and the replay: sum the op constant
/// and the read cells in listed order, then update each written cell as
/// `cell = cell * 0.5 + sum` in listed order.
fn apply_sequential(cells: &mut [f64], idx: usize, reads: &[usize], writes: &[usize]) {
    let mut out = op_constant(idx);
    for &r in reads {
        out += cells[r];
    }
    for &w in writes {
        cells[w] = cells[w] * 0.5 + out;
    }
}

/// Draws a random program over at most `max_ctxs` simultaneous contexts.
/// Every forked context is joined by the end, leaf-first, so a single
/// synchronize on the base context drains the whole program.
pub fn random_program<R: Rng>(
    rng: &mut R,
    max_ops: usize,
    max_cells: usize,
    max_ctxs: usize,
) -> Program {
    let ncells = rng.gen_range(1..=max_cells.max(1));
    let mut ops = Vec::new();
    // live context tree: id -> (parent, live child count)
    let mut parent = vec![0usize];
    let mut kids = vec![0usize];
    let mut live = vec![true];
    let nops = rng.gen_range(1..=max_ops.max(1));
    for _ in 0..nops {
        let live_ids: Vec<usize> = (0..live.len()).filter(|&i| live[i]).collect();
        let leaves: Vec<usize> =
            live_ids.iter().copied().filter(|&i| i != 0 && kids[i] == 0).collect();
        let roll: f64 = rng.gen();
        if roll < 0.15 && live_ids.len() < max_ctxs {
            let p = live_ids[rng.gen_range(0..live_ids.len())];
            let n = rng.gen_range(1..=(max_ctxs - live_ids.len()).min(3));
            for _ in 0..n {
                parent.push(p);
                kids.push(0);
                live.push(true);
            }
            kids[p] += n;
            ops.push(ProgOp::Fork { parent: p, n });
        } else if roll < 0.3 && !leaves.is_empty() {
            let c = leaves[rng.gen_range(0..leaves.len())];
            live[c] = false;
            kids[parent[c]] -= 1;
            ops.push(ProgOp::Join { parent: parent[c], child: c });
        } else {
            let ctx = live_ids[rng.gen_range(0..live_ids.len())];
            let nr = rng.gen_range(0..=3.min(ncells));
            let nw = rng.gen_range(1..=2.min(ncells));
            ops.push(ProgOp::Submit {
                ctx,
                reads: sample_distinct(rng, ncells, nr),
                writes: sample_distinct(rng, ncells, nw),
            });
        }
    }
    // collapse the tree leaf-first
    loop {
        let leaves: Vec<usize> = (0..live.len())
            .filter(|&i| live[i] && i != 0 && kids[i] == 0)
            .collect();
        if leaves.is_empty() {
            break;
        }
        for c in leaves {
            live[c] = false;
            kids[parent[c]] -= 1;
            ops.push(ProgOp::Join { parent: parent[c], child: c });
        }
    }
    Program { ncells, ops }
}

fn sample_distinct<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.gen_range(0..=i));
    }
    pool.truncate(k);
    pool
}

/// Sequential replay: ops applied one at a time in program order.
pub fn replay_oracle(prog: &Program) -> Vec<f64> {
    let mut cells: Vec<f64> = (0..prog.ncells).map(initial_cell).collect();
    for (idx, op) in prog.ops.iter().enumerate() {
        if let ProgOp::Submit { reads, writes, .. } = op {
            apply_sequential(&mut cells, idx, reads, writes);
        }
    }
    cells
}

/// Executes the program on a real stream engine and returns the final cells.
pub fn run_program(world: &Arc<StreamWorld>, prog: &Program) -> Vec<f64> {
    let cells: Vec<Arc<Mutex<f64>>> =
        (0..prog.ncells).map(|i| Arc::new(Mutex::new(initial_cell(i)))).collect();
    let ids: Vec<_> = cells.iter().map(|_| next_object_id()).collect();
    let mut ctxs: Vec<Option<DeviceContext>> = vec![Some(world.context())];
    for (idx, op) in prog.ops.iter().enumerate() {
        match op {
            ProgOp::Submit { ctx, reads, writes } => {
                let mut accesses: Vec<(_, AccessMode)> =
                    reads.iter().map(|&r| (ids[r], AccessMode::Read)).collect();
                accesses.extend(writes.iter().map(|&w| (ids[w], AccessMode::ReadWrite)));
                let rcs: Vec<Arc<Mutex<f64>>> =
                    reads.iter().map(|&r| Arc::clone(&cells[r])).collect();
                let wcs: Vec<Arc<Mutex<f64>>> =
                    writes.iter().map(|&w| Arc::clone(&cells[w])).collect();
                let k = op_constant(idx);
                ctxs[*ctx]
                    .as_ref()
                    .expect("submit on live context")
                    .submit(&accesses, move || {
                        let mut out = k;
                        for c in &rcs {
                            out += *c.lock().unwrap();
                        }
                        for c in &wcs {
                            let mut g = c.lock().unwrap();
                            *g = *g * 0.5 + out;
                        }
                        Ok(())
                    })
                    .expect("submit");
            }
            ProgOp::Fork { parent, n } => {
                let children = ctxs[*parent].as_ref().expect("fork on live context").fork(*n);
                ctxs.extend(children.into_iter().map(Some));
            }
            ProgOp::Join { parent, child } => {
                let c = ctxs[*child].take().expect("join of live child");
                ctxs[*parent].as_ref().expect("join on live parent").join(vec![c]).expect("join");
            }
        }
    }
    ctxs[0].as_ref().unwrap().synchronize().expect("drain");
    cells.iter().map(|c| *c.lock().unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::with_watchdog;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use starkit_core::{spawn_world, StreamConfig};
    use std::time::Duration;

    #[test]
    fn random_programs_join_every_fork() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let prog = random_program(&mut rng, 40, 6, 5);
            let mut forked = 0usize;
            let mut joined = 0usize;
            for op in &prog.ops {
                match op {
                    ProgOp::Fork { n, .. } => forked += n,
                    ProgOp::Join { .. } => joined += 1,
                    ProgOp::Submit { .. } => {}
                }
            }
            assert_eq!(forked, joined);
        }
    }

    #[test]
    fn engine_matches_replay_on_random_programs() {
        with_watchdog(Duration::from_secs(60), || {
            spawn_world(1, |comm| {
                let world =
                    StreamWorld::new(&comm, StreamConfig { workers: 4, jitter_seed: Some(42) });
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                for _ in 0..50 {
                    let prog = random_program(&mut rng, 60, 5, 6);
                    let got = run_program(&world, &prog);
                    let want = replay_oracle(&prog);
                    assert_eq!(got, want);
                }
                Ok(())
            })
            .unwrap();
        });
    }
}
