//! One module per subcommand; each turns a configuration into a report.

mod bounds;
mod decompose;
mod gradcheck;
mod memsweep;
mod spectrum;
mod train;

pub use bounds::bounds;
pub use decompose::decompose;
pub use gradcheck::gradcheck;
pub use memsweep::memsweep;
pub use spectrum::spectrum;
pub use train::train;

use crate::config::RunConfig;
use crate::report::Report;
use crate::{CliError, Command};

/// Runs `command`, folding its flags into `cfg` so the report echoes the
/// configuration that actually ran.
pub fn execute(command: &Command, cfg: &mut RunConfig) -> Result<Report, CliError> {
    match command {
        Command::Decompose(args) => decompose(cfg, args),
        Command::Spectrum(args) => spectrum(cfg, args),
        Command::Gradcheck(args) => gradcheck(cfg, args),
        Command::Train(args) => train(cfg, args),
        Command::Bounds(args) => bounds(cfg, args),
        Command::Memsweep(args) => memsweep(cfg, args),
    }
}

/// Relative slack for comparisons that hold exactly in real arithmetic.
pub(crate) fn le_with_roundoff(a: f64, b: f64, scale: f64) -> bool {
    a <= b * (1.0 + 1e-10) + 1e-12 * scale
}
