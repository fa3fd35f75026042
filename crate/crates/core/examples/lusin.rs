//! Compact prescription with quadratic boundary decay, then the staged
//! exhaustion on a small target.

use std::collections::BTreeMap;

use cheeger_lusin::charts::ChartAtlas;
use cheeger_lusin::cubes::build_dyadic_tree;
use cheeger_lusin::lusin::{prescribe_compact, prescribe_global};
use cheeger_lusin::prescribe::TargetField;
use cheeger_lusin::space::generate_space;
use cheeger_lusin::PointSet;

fn main() -> cheeger_lusin::Result<()> {
    let s = generate_space("grid1d", &BTreeMap::from([("n".to_string(), 513.0)]))?;
    let tree = build_dyadic_tree(&s)?;
    let atlas = ChartAtlas::coordinates(&s)?;
    let omega = PointSet::new(&s, (0..s.len()).filter(|&x| s.coords(x)[0] > 0.2 && s.coords(x)[0] < 0.8));

    let f = TargetField::from_fn(&s, &atlas, omega.clone(), |_, _| vec![1.0])?;
    let compact = prescribe_compact(&s, &tree, &atlas, &omega, &f, 0.3)?;
    println!(
        "compact: {} cubes kept, {} points captured, {} uncaptured, sup|u| = {:.2e}",
        compact.cubes.len(),
        compact.kept.len(),
        compact.uncaptured.len(),
        compact.u.sup_norm()
    );

    let small = TargetField::from_fn(&s, &atlas, omega.clone(), |x, _| {
        vec![if s.coords(x)[0] > 0.5 { 1e-3 } else { -1e-3 }]
    })?;
    match prescribe_global(&s, &tree, &atlas, &omega, &small, 0.1) {
        Ok(r) => {
            println!("global: {} stages, {} captured, sup|u| = {:.2e}", r.stages.len(), r.captured.len(), r.u.sup_norm());
            for st in &r.stages {
                println!("  stage {}: eps {:.4}, radius {:.3}, captured {}", st.i, st.eps, st.radius, st.captured.len());
            }
        }
        Err(e) => println!("global: {e}"),
    }
    Ok(())
}
