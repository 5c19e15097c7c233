//! Prints the parameter budget of the reference encoder geometry (768-wide,
//! 12-head, 160-dim input, 201-dim reconstruction) at 3, 6, and 12 layers,
//! with and without cross-layer weight sharing, plus the component
//! breakdown. Sharing keeps exactly one layer block regardless of depth, so
//! the shared column is flat while the unshared one grows linearly.

use aalbert::encoder::{count_from_config, EncoderConfig};

fn reference(layers: usize, shared: bool) -> EncoderConfig {
    EncoderConfig { num_layers: layers, share_weights: shared, ..EncoderConfig::default() }
}

fn main() {
    println!("layers  sharing    total params");
    for (layers, shared) in [(3, true), (6, true), (12, true), (3, false), (6, false), (12, false)]
    {
        let count = count_from_config(&reference(layers, shared));
        println!(
            "{layers:>6}  {:<9} {:>12}",
            if shared { "shared" } else { "unshared" },
            count.total
        );
    }

    let shared = count_from_config(&reference(12, true));
    let unshared = count_from_config(&reference(12, false));
    println!();
    println!("12-layer breakdown:");
    println!("  input projection        {:>10}", shared.input_projection);
    println!("  one layer block         {:>10}", shared.layer_block);
    println!("  distinct blocks kept    {:>10} (shared) vs {} (unshared)",
        shared.distinct_blocks, unshared.distinct_blocks);
    println!("  reconstruction head     {:>10}", shared.reconstruction_head);
    println!();
    println!(
        "sharing saves {:.1}% of the parameters at 12 layers ({} vs {})",
        100.0 * (1.0 - shared.total as f64 / unshared.total as f64),
        shared.total,
        unshared.total
    );
}
