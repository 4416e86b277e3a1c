//! Extracts history and course feature vectors for a few synthetic scenarios
//! under each partition scheme.
//!
//! cargo run --example feature_extraction

use std::collections::BTreeSet;

use trajmine::data::{window_examples_for, SceneIndex};
use trajmine::features::{assign_scene_factors, dimension_name, extract_all, PartitionScheme, Scope};
use trajmine::synth::gen_dataset;

fn main() -> trajmine::Result<()> {
    let ds = gen_dataset(20, 0.2, 3)?;
    let targets: BTreeSet<i64> = ds.labels.iter().map(|l| l.vehicle_id).collect();
    let examples = window_examples_for(&ds.tracks, 50, Some(&targets))?;
    let index = SceneIndex::new(&ds.tracks);

    let f = assign_scene_factors(&examples[0], &index, Scope::Z);
    println!("example 0 ({:?}): LF {:?} CF {:?} RF {:?}, {} others", ds.labels[0].kind, f.lf_id, f.cf_id, f.rf_id, f.ot_ids.len());

    for scheme in ["fixsegnum:1", "fixsegnum:5", "fixseglen:0.6", "fixseglen:1.4"] {
        let scheme: PartitionScheme = scheme.parse()?;
        let x = extract_all(&examples, &ds.tracks, Scope::X, scheme)?;
        let z = extract_all(&examples, &ds.tracks, Scope::Z, scheme)?;
        println!("{scheme:<14} history dim {:>4}, course dim {:>4}", x[0].dim(), z[0].dim());
    }

    let z = extract_all(&examples, &ds.tracks, Scope::Z, PartitionScheme::FixSegNum(5))?;
    println!("first segment of example 0:");
    for d in 0..26 {
        let v = &z[0];
        println!("  {:<22} {:>9.3}{}", dimension_name(d), v.values[d], if v.mask[d] { "" } else { "  (imputed)" });
    }
    Ok(())
}
