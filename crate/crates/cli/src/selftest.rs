//! The `selftest` subcommand: run the numerical verification battery and
//! print one PASS/FAIL line per check.

use lpattn_core::verify::run_battery;
use std::io::Write;

/// Returns true when every check passed. Output goes to `out` so tests can
/// capture it.
pub fn run(mut out: impl Write) -> std::io::Result<bool> {
    let outcomes = run_battery();
    let mut all_ok = true;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{status} {:<24} {}", o.name, o.detail)?;
        all_ok &= o.passed;
    }
    writeln!(
        out,
        "{}/{} checks passed",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len()
    )?;
    Ok(all_ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_reports_every_check_and_passes() {
        let mut buf = Vec::new();
        let ok = run(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(ok, "battery failed:\n{text}");
        assert!(!text.contains("FAIL"), "battery failed:\n{text}");
        let pass_lines = text.lines().filter(|l| l.starts_with("PASS")).count();
        assert!(pass_lines >= 10, "expected at least 10 checks:\n{text}");
    }
}
