//! Builds a seeded cube tree and the dyadic tree on the same grid and
//! compares their boundary-layer constants.

use std::collections::BTreeMap;

use cheeger_lusin::cubes::{build_cubes, build_dyadic_tree, default_levels, CubeTree};
use cheeger_lusin::space::generate_space;

fn describe(name: &str, tree: &CubeTree) {
    let c = &tree.constants;
    println!("{name}: levels {}..={}, {} cubes", tree.k_min, tree.k_max, tree.cubes().len());
    println!("  a0 = {:.3}, a1 = {:.3}, C1 = {:.3}, eta = {:.3}, R2 = {:?}", c.a0, c.a1, c.c1, c.eta, c.r2);
    for k in tree.k_min..=tree.k_min + 2 {
        let sizes: Vec<usize> = tree.level(k).map(|q| q.members.len()).collect();
        println!("  level {k}: sizes {sizes:?}");
    }
}

fn main() -> cheeger_lusin::Result<()> {
    let s = generate_space("grid1d", &BTreeMap::from([("n".to_string(), 257.0)]))?;
    let (k_min, k_max) = default_levels(&s, 0.5);
    describe("seeded", &build_cubes(&s, 0.5, k_min, k_max, 7)?);
    describe("dyadic", &build_dyadic_tree(&s)?);
    Ok(())
}
