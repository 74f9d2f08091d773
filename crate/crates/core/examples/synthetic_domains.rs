//! The three synthetic shift families, plus the on-disk dataset format.
//!
//! cargo run --example synthetic_domains [out_dir]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use ttgen::synthdata::{
    export_datasets, import_datasets, make_category_shift_split, make_rotated_domains, make_subpopulation_domains,
};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ttgen-data"));

    let rotated = make_rotated_domains(0, &[0.0, 30.0, 60.0], 50, 6, 16)?;
    for d in &rotated {
        println!("rotated domain {}: {} samples, classes {:?}", d.domain_id, d.len(), d.classes());
    }

    let assignment: BTreeMap<usize, BTreeSet<usize>> =
        [(0, (0..2).collect()), (1, (2..4).collect()), (2, (4..6).collect())].into_iter().collect();
    for d in make_category_shift_split(&rotated, &assignment)? {
        println!("category shift domain {}: classes {:?}", d.domain_id, d.classes());
    }

    let (source, target) = make_subpopulation_domains(0, 3, 2, 20, 16)?;
    println!("subpopulation: source {} / target {} samples over {} superclasses", source.len(), target.len(), source.n_classes);

    export_datasets(&rotated, &out)?;
    let back = import_datasets(&out)?;
    assert_eq!(back.len(), rotated.len());
    println!("exported and re-imported {} domains at {}", back.len(), out.display());
    Ok(())
}
