//! Generates a labelled synthetic highway dataset and writes it in the
//! trajectory table format.
//!
//! cargo run --example synth_dataset [-- <n_examples> <out.csv>]

use std::collections::BTreeMap;
use std::path::PathBuf;

use trajmine::synth::{gen_dataset, write_dataset};

fn main() -> trajmine::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("trajmine_synth.csv"));

    let ds = gen_dataset(n, 0.05, 7)?;
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for l in &ds.labels {
        *kinds.entry(format!("{:?}", l.kind)).or_default() += 1;
    }
    println!("{} scenarios, {} tracks, {} rare", ds.labels.len(), ds.tracks.len(), ds.rare_count());
    for (k, c) in kinds {
        println!("  {k:<20} {c}");
    }
    let flags = out.with_extension("flags.json");
    write_dataset(&ds, &out, &flags)?;
    println!("wrote {} and {}", out.display(), flags.display());
    Ok(())
}
