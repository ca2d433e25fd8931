//! Parallel replication runner. Replicates are independent and seeded by
//! index, so results do not depend on the thread count.

use rayon::prelude::*;
use smt2d_core::pipeline::{AnalysisConfig, Procedure};
use smt2d_core::simlab::{check_success, summarize, ReplicateRecord, ReplicationReport, SetupConfig, SimContext};
use smt2d_core::Result;

/// Like [`smt2d_core::simlab::run_replications`], spread over `threads`
/// workers (`None`: rayon's default).
pub fn run_replications_parallel(
    cfg: &SetupConfig,
    procedures: &[Procedure],
    analysis: &AnalysisConfig,
    threads: Option<usize>,
) -> Result<ReplicationReport> {
    let ctx = SimContext::new(cfg)?;
    run_with_context(&ctx, procedures, analysis, threads)
}

/// As [`run_replications_parallel`] with a prepared context.
pub fn run_with_context(
    ctx: &SimContext,
    procedures: &[Procedure],
    analysis: &AnalysisConfig,
    threads: Option<usize>,
) -> Result<ReplicationReport> {
    let reps = ctx.cfg.reps;
    let work = || -> Vec<(usize, Result<ReplicateRecord>)> {
        (0..reps).into_par_iter().map(|rep| (rep, ctx.run_replicate(rep, procedures, analysis))).collect()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| smt2d_core::Error::Numerical(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((rep, e)),
        }
    }
    check_success(records.len(), reps)?;
    let summary = summarize(&records);
    Ok(ReplicationReport { records, failures, summary })
}
