use loract::autodiff::{op_suite, OP_STEP, OP_TOLERANCE};
use loract::compress::CompressionPolicy;
use loract::linalg::{gaussian_matrix, Precision, SeededRng};
use loract::transformer::{
    build_model, build_task, compute_gradients, full_tape_gradients, grad_error, grad_max_rel, unit_backward_error,
    NormImpl, Strategy,
};

use crate::config::RunConfig;
use crate::report::{Report, Table};
use crate::{CliError, GradcheckArgs};

/// Model-level agreement required between mathematically identical paths.
pub const EXACT_TOL: f64 = 1e-8;
/// Agreement required from rank-`n` storage of tall activations.
pub const LOSSLESS_TOL: f64 = 1e-6;

pub fn gradcheck(cfg: &mut RunConfig, args: &GradcheckArgs) -> Result<Report, CliError> {
    let root = SeededRng::new(cfg.seed).child("gradcheck");
    let mut report = Report::new("gradcheck");

    let mut ops = Table::new("ops", &["op", "max_rel_err", "tolerance", "passed"]);
    for c in op_suite(cfg.seed, OP_STEP)? {
        let ok = c.max_rel_err <= OP_TOLERANCE;
        ops.push(vec![c.name.clone().into(), c.max_rel_err.into(), OP_TOLERANCE.into(), ok.into()]);
        report.check(format!("op {}", c.name), ok, format!("{:e}", c.max_rel_err));
    }

    let mut model = build_model(&cfg.model, &mut root.child("model"))?;
    model.flip_norm_correction = args.flip_norm_correction;
    let (batch, _) = build_task(&model, &cfg.task, &mut root.child("task"))?;
    let step_rng = root.child("step");
    let exact = CompressionPolicy::exact();

    let mut rows = Table::new("model", &["check", "value", "tolerance", "passed"]);
    let mut record = |report: &mut Report, name: &str, value: f64, tol: f64| {
        let ok = value <= tol;
        rows.push(vec![name.into(), value.into(), tol.into(), ok.into()]);
        report.check(name, ok, format!("{value:e}"));
    };

    let tape = full_tape_gradients(&model, &batch, &exact, NormImpl::Fused, &step_rng)?;
    let unfused = full_tape_gradients(&model, &batch, &exact, NormImpl::Unfused, &step_rng)?;
    record(&mut report, "fused norm vs unfused", grad_max_rel(&tape.grads, &unfused.grads)?, EXACT_TOL);
    let prenorm = compute_gradients(&model, &batch, &exact, Strategy::PreNorm, &step_rng)?;
    record(&mut report, "prenorm exact vs tape", grad_max_rel(&prenorm.grads, &unfused.grads)?, EXACT_TOL);
    let layerwise = compute_gradients(&model, &batch, &exact, Strategy::LayerWise, &step_rng)?;
    record(&mut report, "layerwise exact vs tape", grad_max_rel(&layerwise.grads, &unfused.grads)?, EXACT_TOL);

    let mut gz_rng = root.child("unit-seeds");
    for unit in model.units() {
        let gz = gaussian_matrix(&mut gz_rng, batch.x.rows(), batch.x.cols());
        let err = unit_backward_error(unit, &batch.x, &gz, batch.seq_len, args.flip_norm_correction)?;
        record(&mut report, &format!("unit backward {}", unit.name), err, EXACT_TOL);
    }

    let lossless = CompressionPolicy { ratio: 1.0, precision: Precision::F64, ..cfg.policy }.allowing_non_saving();
    let lossless_out = compute_gradients(&model, &batch, &lossless, Strategy::PreNorm, &step_rng)?;
    record(&mut report, "lossless ratio 1", grad_max_rel(&lossless_out.grads, &prenorm.grads)?, LOSSLESS_TOL);

    report.tables.push(ops);
    report.tables.push(rows);

    if let Some(ratios) = &args.ratio {
        let mut lossy = Table::new("ratios", &["ratio", "strategy", "grad_error"]);
        for &r in ratios {
            let policy = CompressionPolicy { ratio: r, ..cfg.policy };
            policy.validate()?;
            for strategy in [Strategy::PreNorm, Strategy::LayerWise] {
                let out = compute_gradients(&model, &batch, &policy, strategy, &step_rng)?;
                lossy.push(vec![r.into(), strategy.as_str().into(), grad_error(&out.grads, &prenorm.grads)?.into()]);
            }
        }
        report.tables.push(lossy);
    }
    Ok(report)
}
