use std::time::Instant;

use loract::decompose::{approx_error, decompose as run_method, DecomposeMethod, MethodKind, Norm};
use loract::linalg::{singular_values, SeededRng};

use super::le_with_roundoff;
use crate::config::RunConfig;
use crate::report::{Report, Table};
use crate::{CliError, DecomposeArgs};

/// Sample count for `kind` at rank `k`, or `None` when it does not fit.
fn sample_count(kind: MethodKind, k: usize, l: usize, (m, n): (usize, usize)) -> Option<usize> {
    match kind {
        MethodKind::TruncatedSvd => Some(k),
        MethodKind::RandomProjection => Some(k),
        MethodKind::Rsvd => (k..=m.min(n)).contains(&l).then_some(l),
        MethodKind::SampledOrtho => (k..=m).contains(&l).then_some(l),
    }
}

pub fn decompose(cfg: &mut RunConfig, args: &DecomposeArgs) -> Result<Report, CliError> {
    let sec = &mut cfg.decompose;
    if let Some(ks) = &args.k {
        sec.ks = ks.clone();
    }
    if args.l.is_some() {
        sec.l = args.l;
    }
    if let Some(t) = args.t {
        sec.power_iters = t;
    }
    if let Some(method) = args.method {
        sec.methods = vec![method];
    }
    if let Some(input) = &args.input {
        sec.source.input = Some(input.clone());
    }
    let sec = sec.clone();
    let root = SeededRng::new(cfg.seed).child("decompose");
    let a = sec.source.load(&root)?;
    let (m, n) = a.shape();
    let p = m.min(n);
    let sigma = singular_values(&a)?;
    let norm_a = sigma.first().copied().unwrap_or(0.0);

    let mut ks: Vec<usize> = sec.ks.iter().copied().filter(|&k| k >= 1 && k <= p).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(CliError::Config(format!("no rank in {:?} fits a {m}x{n} matrix", sec.ks)));
    }

    let mut report = Report::new("decompose");
    let mut errors = Table::new("decompose", &["method", "k", "l", "t", "spectral_err", "frob_err"]);
    let mut timing = Table::new("timing", &["method", "k", "l", "t", "wall_ns"]).volatile();
    let mut tsvd_errs = Vec::new();
    for &k in &ks {
        let l = sec.l.unwrap_or(k + sec.oversample);
        let mut at_k = Vec::new();
        for &kind in &sec.methods {
            let Some(l) = sample_count(kind, k, l, (m, n)) else {
                report.note(format!("{kind} skipped at k = {k}: l = {l} out of range"));
                continue;
            };
            let method = match kind {
                MethodKind::TruncatedSvd => DecomposeMethod::TruncatedSvd,
                MethodKind::Rsvd => DecomposeMethod::Rsvd { l, t: sec.power_iters },
                MethodKind::SampledOrtho => DecomposeMethod::SampledOrtho { l, t: sec.power_iters },
                MethodKind::RandomProjection => DecomposeMethod::RandomProjection { l },
            };
            let mut rng = root.child(kind.as_str()).child_indexed("k", k as u64);
            let start = Instant::now();
            let f = run_method(&a, k, method, &mut rng)?;
            let wall_ns = start.elapsed().as_nanos() as u64;
            let spectral = approx_error(&a, &f, Norm::Spectral)?;
            let frob = approx_error(&a, &f, Norm::Frobenius)?;
            let t = if kind.is_orthogonal() { sec.power_iters } else { 0 };
            errors.push(vec![kind.as_str().into(), k.into(), l.into(), t.into(), spectral.into(), frob.into()]);
            timing.push(vec![kind.as_str().into(), k.into(), l.into(), t.into(), wall_ns.into()]);
            at_k.push((kind, spectral, frob));
        }

        if let Some(&(_, best_s, best_f)) = at_k.iter().find(|(kind, ..)| *kind == MethodKind::TruncatedSvd) {
            tsvd_errs.push((best_s, best_f));
            let worse: Vec<String> = at_k
                .iter()
                .filter(|(_, s, f)| !le_with_roundoff(best_s, *s, norm_a) || !le_with_roundoff(best_f, *f, norm_a))
                .map(|(kind, ..)| kind.to_string())
                .collect();
            report.check(format!("optimality k={k}"), worse.is_empty(), if worse.is_empty() { String::new() } else { format!("beaten by {worse:?}") });
        }
        // Exactly rank ≤ k (numerically): every orthogonal method must recover it.
        if sigma.get(k).is_none_or(|s| *s <= 1e-12 * norm_a) {
            for &(kind, s, _) in at_k.iter().filter(|(kind, ..)| kind.is_orthogonal() || *kind == MethodKind::TruncatedSvd) {
                report.check(format!("exact-rank {kind} k={k}"), s <= 1e-6 * norm_a, format!("spectral error {s:e}"));
            }
        }
    }
    if tsvd_errs.len() > 1 {
        let monotone = tsvd_errs
            .windows(2)
            .all(|w| le_with_roundoff(w[1].0, w[0].0, norm_a) && le_with_roundoff(w[1].1, w[0].1, norm_a));
        report.check("tsvd monotone in k", monotone, "");
    }
    report.tables.push(errors);
    report.tables.push(timing);
    Ok(report)
}
