use anyhow::bail;

use super::Run;
use crate::phantom::{generate_cohort, write_cohort};

pub(super) fn generate(run: &mut Run, count: usize, size: usize) -> anyhow::Result<()> {
    if count == 0 || size == 0 {
        bail!("--count and --size must be positive");
    }
    let dims = run.config.data.voxel_dims_mm;
    let cohort = generate_cohort(count, size, dims, run.seed)?;
    write_cohort(&cohort, &run.out)?;
    for p in &cohort {
        run.output(&p.id);
        println!("{}  {} structures", p.id, p.structures.len());
    }
    println!("wrote {count} phantoms of {size}^3 voxels to {}", run.out.display());
    Ok(())
}
