use loract::compress::{kept_ratio_with, singular_spectrum};
use loract::linalg::SeededRng;

use crate::config::RunConfig;
use crate::report::{Report, Table};
use crate::{CliError, SpectrumArgs};

pub fn spectrum(cfg: &mut RunConfig, args: &SpectrumArgs) -> Result<Report, CliError> {
    if let Some(input) = &args.input {
        cfg.spectrum.source.input = Some(input.clone());
    }
    let sec = cfg.spectrum.clone();
    let a = sec.source.load(&SeededRng::new(cfg.seed).child("spectrum"))?;
    if a.is_zero() {
        return Err(CliError::Config("spectrum of an all-zero matrix is undefined".into()));
    }
    let sigma = singular_spectrum(&a)?;

    let mut report = Report::new("spectrum");
    let mut values = Table::new("spectrum", &["index", "sigma"]);
    for (i, s) in sigma.iter().enumerate() {
        values.push(vec![(i + 1).into(), (*s).into()]);
    }
    let mut kept = Table::new("kept", &["fraction", "kept_ratio", "kept_count"]);
    let mut fractions = sec.fractions.clone();
    fractions.sort_by(f64::total_cmp);
    let mut ratios = Vec::with_capacity(fractions.len());
    for &f in &fractions {
        let r = kept_ratio_with(&sigma, f, sec.energy)?;
        kept.push(vec![f.into(), r.into(), ((r * sigma.len() as f64).round() as usize).into()]);
        ratios.push((f, r));
    }
    report.check("kept ratio nondecreasing in fraction", ratios.windows(2).all(|w| w[0].1 <= w[1].1), "");
    if let Some(&(_, r)) = ratios.iter().find(|(f, _)| *f == 1.0) {
        if sigma.iter().all(|s| *s > 0.0) {
            report.check("full energy keeps everything", r == 1.0, format!("ratio {r}"));
        }
    }
    report.tables.push(values);
    report.tables.push(kept);
    Ok(report)
}
