//! Circuit report for the guiding example plus pass rates of the rule
//! completion, chaining, start and decision checks over a validation set.
//!
//! cargo run --release --example report -- CKPT [examples]

use horncircuit::interp::{circuit_report, dataset_circuit_stats, PinvCache, ReportThresholds};
use horncircuit::persist::load_checkpoint;
use horncircuit::taskgen::Example;
use horncircuit::train::DataSpec;

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: report CKPT [examples]");
    let limit: usize = args.next().map_or(1024, |s| s.parse().expect("examples"));
    let (params, _) = load_checkpoint(&ckpt)?;
    let thresholds = ReportThresholds::default();
    let mut cache = PinvCache::new();

    let guiding = Example::parse_line("C>D,A>B,B>C,E>F,D>E|A>F\tA>B,B>C,C>D,D>E,E>F-1")?;
    let report = circuit_report(&params, &guiding, &thresholds, &mut cache)?;
    println!("@{} -> {}", report.prompt, report.generated);
    for c in report.completion.iter().chain(&report.chaining) {
        let d = c.link.decoded.as_ref();
        let top = |v: Option<&Vec<horncircuit::interp::DecodedToken>>| v.and_then(|v| v.first()).map_or('?', |t| t.token);
        println!(
            "{:?} slot {:?}: {} -> {} want {} | q {} k {} v {} | {}",
            c.class,
            c.slot,
            c.link.src,
            c.dst,
            c.expected,
            top(d.map(|d| &d.q)),
            top(d.map(|d| &d.k)),
            top(d.map(|d| &d.v)),
            if c.passed { "pass" } else { "fail" }
        );
    }

    let (_, mut val) = DataSpec::default().materialize(0)?;
    val.examples.truncate(limit);
    let s = dataset_circuit_stats(&params, &val, &thresholds, &mut cache)?;
    println!(
        "{} examples: completion {:.3}, chaining {:.3}, start {:.3}, decision {:.3}",
        s.examples,
        s.completion_rate(),
        s.chaining_rate(),
        s.start_rate(),
        s.final_rate()
    );
    Ok(())
}
