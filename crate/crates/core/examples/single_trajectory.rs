//! One run of the feedback / displace / probe / center protocol.
//!
//! ```text
//! cargo run --release --example single_trajectory -- 10 7
//! ```

use qnd_cat::io::{save_step_log, LogFormat};
use qnd_cat::protocol::{run_protocol, ProtocolConfig};

fn main() -> qnd_cat::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_star = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    let mut config = ProtocolConfig::for_n_star(n_star);
    config.seed = seed;
    let record = run_protocol(&config)?;

    println!(
        "outcome {:?} after {:.3} us, {} restarts",
        record.outcome,
        record.elapsed * 1e6,
        record.restarts
    );
    for tr in &record.transitions {
        println!(
            "  t = {:7.3} us  {:?} -> {:?}  <n> = {:6.3}  <p> = {:6.3}",
            tr.t * 1e6,
            tr.from,
            tr.to,
            tr.exp_n,
            tr.exp_p
        );
    }
    if let Some(f) = record.fidelity {
        println!("fidelity {:.4}, |alpha| = {:.3}", f.value, f.ansatz.alpha().norm());
    }
    save_step_log(
        &record.steps,
        LogFormat::Csv,
        std::path::Path::new("trajectory_steps.csv"),
    )?;
    println!("{} steps logged to trajectory_steps.csv", record.steps.len());
    Ok(())
}
