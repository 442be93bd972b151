//! Attention averaged over the positive or negative examples of a dataset,
//! exposing the token-independent links into the decision position.
//!
//! cargo run --release --example average -- CKPT [positive|negative|all] [threshold]

use horncircuit::explore::{self, AverageRequest, Subset};
use horncircuit::persist::load_checkpoint;
use horncircuit::train::DataSpec;

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: average CKPT [subset] [threshold]");
    let subset: Subset = args.next().map_or(Ok(Subset::Positive), |s| s.parse())?;
    let threshold: f32 = args.next().map_or(0.1, |s| s.parse().expect("threshold"));
    let (params, _) = load_checkpoint(&ckpt)?;
    let (_, val) = DataSpec::default().materialize(0)?;

    let req = AverageRequest {
        ckpt,
        subset,
        threshold,
        dst_filter: explore::dst_preset("-", val.m),
    };
    let avg = explore::average(&params, &val, &req)?;
    println!("{} {} sequences", avg.count, subset.as_str());
    for l in &avg.links {
        println!(
            "layer {} {:>2} {} -> {:>2} {}  {:.3}",
            l.layer, l.src, avg.template[l.src], l.dst, avg.template[l.dst], l.strength
        );
    }
    Ok(())
}
