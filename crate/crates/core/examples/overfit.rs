//! Overfits the separator on a single toy mixture and prints SI-SDRi.
//!
//! cargo run --release --example overfit -- [steps] [work_dir]

use ctxsep::experiments::{run_overfit, OverfitOptions};
use ctxsep::Exec;

fn main() -> ctxsep::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args
        .next()
        .map(|s| s.parse().expect("steps"))
        .unwrap_or(2000);
    let dir = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("ctxsep-overfit"));
    let opts = OverfitOptions {
        steps,
        ..OverfitOptions::default()
    };
    let r = run_overfit(&dir, &opts, Exec::default())?;
    println!(
        "steps {} loss {:.3} -> {:.3} si_sdri {:.2} dB ({:.1} s)",
        r.steps, r.initial_loss, r.final_loss, r.si_sdri, r.seconds
    );
    Ok(())
}
