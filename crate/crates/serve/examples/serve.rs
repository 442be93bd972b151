//! Serves a checkpoint directory on localhost, with a freshly generated
//! validation set behind `/average`.
//!
//! cargo run --release -p horncircuit-serve --example serve -- CKPT_DIR [port]
//!
//! curl localhost:8080/checkpoints
//! curl -X POST localhost:8080/run -H 'content-type: application/json' \
//!      -d '{"ckpt":"seed0-final","prompt":"C>D,A>B,B>C,E>F,D>E|A>F"}'

use std::net::SocketAddr;

use horncircuit::train::DataSpec;
use horncircuit_serve::{serve, AppState};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().ok_or("usage: serve CKPT_DIR [port]")?;
    let port: u16 = args.next().map_or(Ok(8080), |p| p.parse())?;
    let (_, val) = DataSpec::default().materialize(0)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    eprintln!("serving {dir} on http://{addr}");
    serve(AppState::new(dir).with_dataset(val), addr).await?;
    Ok(())
}
