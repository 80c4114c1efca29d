use loract::compress::CompressionPolicy;
use loract::linalg::SeededRng;
use loract::transformer::{build_model, build_task, compute_gradients, Strategy, TaskConfig};

use crate::config::RunConfig;
use crate::report::{Report, Table};
use crate::{CliError, MemsweepArgs};

/// Bytes one pre-norm unit keeps for an `m×n` input under `policy`: the
/// normalized activation (exact or as rank-`k` factors) plus the RMS vector.
pub fn unit_bytes(policy: &CompressionPolicy, m: usize, n: usize) -> u64 {
    let elem = policy.precision.bytes_per_element();
    let activation = if policy.would_compress(m, n) { (m + n) * policy.rank_for(m, n) } else { m * n };
    ((activation + m) * elem) as u64
}

pub fn memsweep(cfg: &mut RunConfig, args: &MemsweepArgs) -> Result<Report, CliError> {
    if let Some(r) = args.ratio {
        cfg.policy.ratio = r;
    }
    if let Some(method) = args.method {
        cfg.policy.method = method;
    }
    cfg.validate()?;
    let policy = cfg.policy;
    let exact = CompressionPolicy { compress: false, ..policy };
    let root = SeededRng::new(cfg.seed).child("memsweep");
    let model = build_model(&cfg.model, &mut root.child("model"))?;
    let units = model.units().count() as u64 + 1;
    let n = cfg.model.width;

    let mut report = Report::new("memsweep");
    let mut table = Table::new(
        "memsweep",
        &["batch", "seq_len", "m", "exact_bytes", "stored_bytes", "analytic_exact", "analytic_stored", "ratio"],
    );
    let mut by_seq: Vec<(usize, usize, u64)> = Vec::new();
    for &seq_len in &cfg.memsweep.seq_lens {
        for &batch in &cfg.memsweep.batches {
            let task = TaskConfig { batch, seq_len, ..cfg.task.clone() };
            let (data, _) = build_task(&model, &task, &mut root.child_indexed("task", (batch * 100_000 + seq_len) as u64))?;
            let step = root.child("step");
            let measured_exact = compute_gradients(&model, &data, &exact, Strategy::PreNorm, &step)?.ledger;
            let measured = compute_gradients(&model, &data, &policy, Strategy::PreNorm, &step)?.ledger;
            let m = task.rows();
            let analytic_exact = units * unit_bytes(&exact, m, n);
            let analytic_stored = units * unit_bytes(&policy, m, n);
            table.push(vec![
                batch.into(),
                seq_len.into(),
                m.into(),
                measured_exact.stored_total().into(),
                measured.stored_total().into(),
                analytic_exact.into(),
                analytic_stored.into(),
                measured.compression_ratio().into(),
            ]);
            let label = format!("batch {batch} seq {seq_len}");
            report.check(
                format!("{label} ledger matches formula"),
                measured_exact.stored_total() == analytic_exact && measured.stored_total() == analytic_stored,
                format!("{}/{} vs {analytic_exact}/{analytic_stored}", measured_exact.stored_total(), measured.stored_total()),
            );
            by_seq.push((seq_len, batch, measured_exact.stored_total()));
        }
    }
    // Exact bytes are linear in m = batch · seq_len.
    for &(s, b, bytes) in &by_seq {
        if let Some(&(_, _, doubled)) = by_seq.iter().find(|&&(s2, b2, _)| s2 == s && b2 == 2 * b) {
            report.check(format!("doubling batch {b} at seq {s}"), doubled == 2 * bytes, format!("{bytes} -> {doubled}"));
        }
    }
    report.note(
        "Byte counts come from a small synthetic model; they check linear growth in batch and the (m+n)k storage \
         formula, not absolute footprints of large models.",
    );
    report.tables.push(table);
    Ok(report)
}
