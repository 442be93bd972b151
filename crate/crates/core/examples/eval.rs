//! Greedy evaluation of a checkpoint on a freshly generated validation set.
//!
//! cargo run --release --example eval -- CKPT [seed]

use horncircuit::persist::load_checkpoint;
use horncircuit::train::{evaluate, DataSpec};

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: eval CKPT [seed]");
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let (params, header) = load_checkpoint(&ckpt)?;
    println!("{ckpt}: tag {} epoch {}", header.meta.tag, header.meta.epoch);

    let (_, val) = DataSpec::default().materialize(seed)?;
    let r = evaluate(&params, &val)?;
    println!("full sequence       {:.4}", r.full_seq_acc);
    println!("excluding last      {:.4}", r.acc_excl_last);
    println!("last token only     {:.4}", r.last_token_acc);
    for o in r.outcomes.iter().filter(|o| !o.correct).take(5) {
        println!("miss: {}  want {}  got {}", o.prompt, o.target, o.generated);
    }
    Ok(())
}
