//! Traces one prompt through a checkpoint: residual decodings, attention
//! links above a threshold and their Q/K/V decodings, as text and SVG.
//!
//! cargo run --release --example inspect -- CKPT [prompt] [threshold] [out.svg]

use horncircuit::explore::{self, RunRequest, RunThresholds};
use horncircuit::interp::PinvCache;
use horncircuit::persist::{checkpoint_id, load_checkpoint, write_text};

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: inspect CKPT [prompt] [threshold] [out.svg]");
    let prompt = args.next().unwrap_or_else(|| "C>D,A>B,B>C,E>F,D>E|A>F".into());
    let link: f32 = args.next().map_or(0.4, |s| s.parse().expect("threshold"));
    let (params, _) = load_checkpoint(&ckpt)?;

    let m = 5;
    let req = RunRequest {
        ckpt: checkpoint_id(ckpt.as_ref()).unwrap_or_default(),
        prompt,
        thresholds: RunThresholds {
            link,
            ..Default::default()
        },
        // only links into the output '>' positions
        dst_filter: explore::dst_preset(">", m),
        layer: None,
    };
    let trace = explore::run(&params, &req, &mut PinvCache::new())?;
    print!("{}", explore::render_text(&trace));
    if let Some(out) = args.next() {
        write_text(&explore::render_svg(&trace), &out)?;
        println!("wrote {out}");
    }
    Ok(())
}
