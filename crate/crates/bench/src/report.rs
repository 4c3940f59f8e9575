use std::io::{self, Write};

use crate::workload::RunResult;

pub const CSV_HEADER: [&str; 8] = [
    "impl",
    "threads",
    "n_refs",
    "store_prob",
    "duration_s",
    "ops_total",
    "throughput",
    "violations",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    /// CSV followed by a blank line and a speedup table.
    CsvWithSummary,
}

/// Writes one CSV row per result. `LF` line endings, no trailing fields.
pub fn emit_report<W: Write>(results: &[RunResult], format: Format, out: W) -> io::Result<()> {
    if results.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "no results to report"));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        w.write_record([
            r.cell_impl.name().to_string(),
            r.threads.to_string(),
            r.n_refs.to_string(),
            r.store_prob.to_string(),
            format!("{:.3}", r.duration_s),
            r.ops_total.to_string(),
            format!("{:.1}", r.throughput),
            r.violations.to_string(),
        ])?;
    }
    w.flush()?;
    let mut out = w.into_inner().map_err(|e| e.into_error())?;
    if format == Format::CsvWithSummary {
        writeln!(out)?;
        write_summary(results, &mut out)?;
    }
    Ok(())
}

/// Throughput of each result relative to the single-thread run of the same
/// implementation and settings, if there is one.
pub fn speedups(results: &[RunResult]) -> Vec<Option<f64>> {
    results
        .iter()
        .map(|r| {
            results
                .iter()
                .find(|b| {
                    b.threads == 1
                        && b.cell_impl == r.cell_impl
                        && b.n_refs == r.n_refs
                        && b.store_prob == r.store_prob
                })
                .map(|b| r.throughput / b.throughput)
        })
        .collect()
}

fn write_summary<W: Write>(results: &[RunResult], out: &mut W) -> io::Result<()> {
    writeln!(out, "{:<20} {:>7} {:>14} {:>8}", "impl", "threads", "Mops/s", "speedup")?;
    for (r, s) in results.iter().zip(speedups(results)) {
        let s = s.map_or_else(|| "-".to_string(), |s| format!("{s:.2}x"));
        writeln!(
            out,
            "{:<20} {:>7} {:>14.3} {:>8}",
            r.cell_impl.name(),
            r.threads,
            r.throughput / 1e6,
            s
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::CellImpl;

    fn result(threads: usize, throughput: f64) -> RunResult {
        RunResult {
            cell_impl: CellImpl::Refcount,
            threads,
            n_refs: 10,
            store_prob: 0.1,
            duration_s: 1.0,
            ops_total: throughput as u64,
            loads: throughput as u64,
            stores: 0,
            throughput,
            violations: 0,
        }
    }

    fn render(results: &[RunResult], format: Format) -> String {
        let mut buf = Vec::new();
        emit_report(results, format, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn one_result_one_row() {
        let text = render(&[result(1, 100.0)], Format::Csv);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines, ["impl,threads,n_refs,store_prob,duration_s,ops_total,throughput,violations", "refcount,1,10,0.1,1.000,100,100.0,0"]);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn sweep_summary_has_speedups() {
        let rs: Vec<_> = [1, 2, 4, 8].iter().map(|&t| result(t, 100.0 * t as f64)).collect();
        let text = render(&rs, Format::CsvWithSummary);
        assert_eq!(text.lines().take_while(|l| !l.is_empty()).count(), 5);
        assert!(text.contains("8.00x"));
        assert_eq!(speedups(&rs)[2], Some(4.0));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(emit_report(&[], Format::Csv, Vec::new()).is_err());
    }
}
