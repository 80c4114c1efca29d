use loract::compress::CompressionPolicy;
use loract::transformer::{train_loop, window_means, TransformerError};

use crate::config::RunConfig;
use crate::report::{Report, Table};
use crate::{CliError, TrainArgs};

/// Width of the windows whose mean losses must decrease.
pub const WINDOW: usize = 50;

pub fn train(cfg: &mut RunConfig, args: &TrainArgs) -> Result<Report, CliError> {
    if let Some(ratios) = &args.ratio {
        cfg.train.ratios = ratios.clone();
    }
    if let Some(method) = args.method {
        cfg.policy.method = method;
    }
    if let Some(t) = args.t {
        cfg.policy.power_iters = t;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;

    let mut report = Report::new("train");
    let mut curves = Table::new("curves", &["ratio", "step", "loss", "grad_error"]);
    let mut ledger = Table::new("ledger", &["ratio", "label", "rows", "cols", "k", "exact_bytes", "stored_bytes"]);
    let mut summary =
        Table::new("train", &["ratio", "final_loss", "exact_bytes", "stored_bytes", "ledger_ratio", "monotone_windows"]);
    let mut ledger_ratios = Vec::new();
    for &ratio in &cfg.train.ratios {
        let policy = CompressionPolicy { ratio, ..cfg.policy };
        let run = match train_loop(&cfg.train_config(policy)) {
            Ok(run) => run,
            Err(TransformerError::Diverged { step, loss }) => {
                report.check(format!("ratio {ratio} converges"), false, format!("diverged at step {step} (loss {loss})"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for (step, loss) in run.losses.iter().enumerate() {
            curves.push(vec![ratio.into(), step.into(), (*loss).into(), run.grad_errors.get(step).copied().into()]);
        }
        for e in run.ledger.entries() {
            ledger.push(vec![
                ratio.into(),
                e.label.as_str().into(),
                e.rows.into(),
                e.cols.into(),
                e.k.into(),
                e.exact_bytes.into(),
                e.stored_bytes.into(),
            ]);
        }
        let windows = window_means(&run.losses, WINDOW);
        let monotone = windows.windows(2).all(|w| w[1] < w[0]);
        let lr = run.ledger.compression_ratio();
        summary.push(vec![
            ratio.into(),
            run.final_loss.into(),
            run.ledger.exact_total().into(),
            run.ledger.stored_total().into(),
            lr.into(),
            monotone.into(),
        ]);
        report.check(format!("ratio {ratio} loss windows decrease"), monotone, format!("{windows:?}"));
        let k = policy.rank_for(cfg.task.rows(), cfg.model.width);
        ledger_ratios.push((ratio, k, lr));
    }

    // A smaller retained rank must store strictly fewer bytes.
    ledger_ratios.sort_by(|a, b| b.0.total_cmp(&a.0));
    for w in ledger_ratios.windows(2) {
        let ((r0, k0, l0), (r1, k1, l1)) = (w[0], w[1]);
        if k1 < k0 {
            report.check(format!("ledger ratio {r1} below {r0}"), l1 < l0, format!("{l1} vs {l0}"));
        }
    }
    report.tables.push(summary);
    report.tables.push(curves);
    report.tables.push(ledger);
    Ok(report)
}
