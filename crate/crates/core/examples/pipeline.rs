//! Runs every pipeline stage for one corpus kind and prints stage timings.
//!
//! `cargo run --release -p lud-core --example pipeline -- code|CONFIG.toml runs/code`

use std::time::Instant;

use lud_core::corpus::CorpusKind;
use lud_core::pipeline::{self, PipelineConfig};

fn main() -> lud_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let first = args.next().unwrap_or_else(|| "code".into());
    let mut cfg = if first.ends_with(".toml") {
        PipelineConfig::load(first.as_ref())?
    } else {
        PipelineConfig::desk_default(first.parse::<CorpusKind>()?)
    };
    if let Some(dir) = args.next() {
        cfg.run_dir = dir.into();
    }
    let t = Instant::now();
    let c = pipeline::gen_corpus(&cfg)?;
    println!("gen_corpus {:?} {:.1}s", c, t.elapsed().as_secs_f64());
    let f = pipeline::finetune(&cfg)?;
    println!("finetune loss {:?} {:.1}s", f.loss_history, t.elapsed().as_secs_f64());
    let i = pipeline::identify(&cfg)?;
    println!("identify {:?} {:.1}s", i.stats, t.elapsed().as_secs_f64());
    let r = pipeline::reconfigure(&cfg)?;
    println!(
        "reconfigure {} instances {:.1}s",
        r.n_instances,
        t.elapsed().as_secs_f64()
    );
    let c = pipeline::continual_train(&cfg)?;
    println!("continual loss {:?} {:.1}s", c.loss_history, t.elapsed().as_secs_f64());
    let s = pipeline::sweep(&cfg)?;
    print!("{}", s.to_markdown());
    println!("sweep {:.1}s", t.elapsed().as_secs_f64());
    pipeline::report(&cfg)?;
    Ok(())
}
