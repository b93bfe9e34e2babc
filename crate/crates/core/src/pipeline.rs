//! Analysis, classification and table construction in one step.

use crate::analysis::{analyze, classify_pointers, emit_statistics, Analysis, PointerPartition, StatsRecord};
use crate::ir::Module;
use crate::metadata::{build_tables, MetadataError, ObjectPointerTable};
use crate::runtime::{run, ExecutionReport, RuntimeConfig};

pub struct Compiled {
    pub analysis: Analysis,
    pub partition: PointerPartition,
    pub table: ObjectPointerTable,
}

pub fn compile(module: &Module) -> Compiled {
    let analysis = analyze(module);
    let partition = classify_pointers(&analysis.stage2, module);
    let table = build_tables(&analysis.stage2, &partition, module);
    Compiled {
        analysis,
        partition,
        table,
    }
}

impl Compiled {
    pub fn stats(&self, module: &Module) -> StatsRecord {
        emit_statistics(&self.analysis.stage2, module)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Verdict {
    Prevented,
    NotPrevented,
    NotApplicable,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Prevented => "PREVENTED",
            Verdict::NotPrevented => "NOT-PREVENTED",
            Verdict::NotApplicable => "NOT-APPLICABLE",
        }
    }
}

pub struct UafCheck {
    pub verdict: Verdict,
    pub protected: ExecutionReport,
    pub unprotected: ExecutionReport,
}

/// Run `module` unprotected and protected (sweeping each free before the
/// program continues) and compare. A module without frees is not
/// applicable; otherwise the protected run must touch no freed memory.
pub fn check_uaf(module: &Module, compiled: &Compiled, stack_protection: bool) -> Result<UafCheck, MetadataError> {
    let unprotected = run(module, &compiled.table, RuntimeConfig::unprotected())?;
    let protected = run(
        module,
        &compiled.table,
        RuntimeConfig {
            stack_protection,
            sync_sweep: true,
            ..Default::default()
        },
    )?;
    let has_free = module.functions.iter().flat_map(|f| f.insts()).any(|i| i.is_free());
    let verdict = if !has_free {
        Verdict::NotApplicable
    } else if protected.stale_accesses() == 0 {
        Verdict::Prevented
    } else {
        Verdict::NotPrevented
    };
    Ok(UafCheck {
        verdict,
        protected,
        unprotected,
    })
}

/// One benchmark configuration, summarized over repetitions.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub config: &'static str,
    pub median_wall_ns: u64,
    pub peak_heap_bytes: u64,
    pub peak_stack_bytes: u64,
    pub events: u64,
    pub nullified: u64,
    /// Median wall time relative to the unprotected median.
    pub ratio: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub threads: usize,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, config: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("threads {} reps {}\nconfig median_ns ratio peak_heap peak_stack events nullified\n", self.threads, self.reps);
        for r in &self.rows {
            s.push_str(&format!(
                "{} {} {:.3} {} {} {} {}\n",
                r.config, r.median_wall_ns, r.ratio, r.peak_heap_bytes, r.peak_stack_bytes, r.events, r.nullified
            ));
        }
        s
    }
}

pub const BENCH_CONFIGS: [&str; 3] = ["unprotected", "protected-stack-off", "protected-stack-on"];

/// Run `module` `reps` times under each configuration, interleaving the
/// configurations so drift in machine load hits all of them alike.
pub fn bench(module: &Module, compiled: &Compiled, threads: usize, reps: usize) -> Result<BenchReport, MetadataError> {
    let configs = [
        RuntimeConfig { threads, ..RuntimeConfig::unprotected() },
        RuntimeConfig { threads, stack_protection: false, ..Default::default() },
        RuntimeConfig { threads, ..Default::default() },
    ];
    let reps = reps.max(1);
    let mut runs: Vec<Vec<ExecutionReport>> = vec![Vec::new(); configs.len()];
    for _ in 0..reps {
        for (i, cfg) in configs.iter().enumerate() {
            runs[i].push(run(module, &compiled.table, *cfg)?);
        }
    }
    let mut rows = Vec::new();
    for (name, reports) in BENCH_CONFIGS.iter().zip(&runs) {
        let mut walls: Vec<u64> = reports.iter().map(|r| r.wall_time_ns).collect();
        walls.sort_unstable();
        let last = reports.last().expect("at least one rep");
        rows.push(BenchRow {
            config: name,
            median_wall_ns: walls[walls.len() / 2],
            peak_heap_bytes: last.peak_heap_bytes,
            peak_stack_bytes: last.peak_stack_bytes,
            events: last.events,
            nullified: last.nullified(),
            ratio: 0.0,
        });
    }
    let base = rows[0].median_wall_ns.max(1) as f64;
    for r in &mut rows {
        r.ratio = r.median_wall_ns as f64 / base;
    }
    Ok(BenchReport { threads, reps, rows })
}

/// Fill the runtime columns of `stats` from an execution.
pub fn runtime_stats(stats: StatsRecord, report: &ExecutionReport) -> StatsRecord {
    StatsRecord {
        runtime_allocs: Some(report.allocs),
        runtime_frees: Some(report.frees),
        invalidated_pointers: Some(report.nullified()),
        ..stats
    }
}
