//! Generates a small balanced dataset, prints a few examples with their
//! oracle verdicts, and shows the size of the generation space.
//!
//! cargo run --release --example gen -- [count] [seed]

use horncircuit::taskgen::{count_space, gen_dataset, oracle_label, split};
use horncircuit::vocab::Supervision;

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(16, |s| s.parse().expect("count"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    println!("distinct generations for n=20, m=5: {}", count_space(20, 5)?);
    let data = gen_dataset(count, 20, 5, seed, Supervision::Cot)?;
    for e in data.examples.iter().take(6) {
        let verdict = oracle_label(&e.rules, e.q0, e.q1);
        println!(
            "@{}  ->  {}   (label {}, oracle path {})",
            e.prompt(),
            e.target,
            e.label as u8,
            verdict.path.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
        );
    }
    let (train, val) = split(&data, 0.75, seed)?;
    println!(
        "{} examples: {} positive / {} negative; split {} train / {} val",
        data.len(),
        data.positives(),
        data.negatives(),
        train.len(),
        val.len()
    );
    Ok(())
}
