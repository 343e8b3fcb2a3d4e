//! Group stage on mock teachers, then the segregate stage initialised from it.
//!
//! cargo run --release --example two_stage -- [group_epochs] [segregate_epochs] [work_dir] [num_blocks]

use ctxsep::experiments::{run_two_stage, TwoStageOptions};
use ctxsep::Exec;

fn main() -> ctxsep::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut opts = TwoStageOptions::default();
    if let Some(v) = args.next() {
        opts.group_epochs = v.parse().expect("group_epochs");
    }
    if let Some(v) = args.next() {
        opts.segregate_epochs = v.parse().expect("segregate_epochs");
    }
    let dir = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("ctxsep-two-stage"));
    if let Some(v) = args.next() {
        opts.model.num_blocks = v.parse().expect("num_blocks");
    }
    let r = run_two_stage(&dir, &opts, Exec::default())?;
    for e in &r.group.history {
        println!(
            "group     epoch {:3} train {:.4} dev {:.4} ctx {:.4} lr {:.1e}",
            e.epoch, e.train_loss, e.dev_loss, e.dev_contextual, e.lr
        );
    }
    for e in &r.segregate.history {
        println!(
            "segregate epoch {:3} train {:.4} dev {:.4} lr {:.1e}",
            e.epoch, e.train_loss, e.dev_loss, e.lr
        );
    }
    println!(
        "contextual dev loss {:.4} -> {:.4} (reduction {:.1}%)",
        r.group.initial_dev_contextual,
        r.group.best_dev_contextual,
        100.0 * r.contextual_reduction
    );
    if let Some(a) = r.dev_aggregate() {
        println!(
            "dev si_sdri {:.2} dB sdri {:.2} dB over {} mixtures",
            a.si_sdri_mean, a.sdri_mean, a.n
        );
    }
    println!("total {:.1} s", r.seconds);
    Ok(())
}
