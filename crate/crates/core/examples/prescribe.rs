//! Prescribes the derivative sign(x - 1/2) on the unit interval grid and
//! reports the exceptional set, the alpha ladder and the Lip norms.

use std::collections::BTreeMap;

use cheeger_lusin::charts::ChartAtlas;
use cheeger_lusin::cubes::build_dyadic_tree;
use cheeger_lusin::prescribe::{prescribe, TargetField};
use cheeger_lusin::space::generate_space;
use cheeger_lusin::PointSet;

fn main() -> cheeger_lusin::Result<()> {
    let s = generate_space("grid1d", &BTreeMap::from([("n".to_string(), 513.0)]))?;
    let tree = build_dyadic_tree(&s)?;
    let atlas = ChartAtlas::coordinates(&s)?;
    let omega = PointSet::all(&s);
    let f = TargetField::from_fn(&s, &atlas, omega.clone(), |x, _| {
        vec![if s.coords(x)[0] > 0.5 { 1.0 } else { -1.0 }]
    })?;
    for eps in [0.5, 0.25, 0.1] {
        let r = prescribe(&s, &tree, &atlas, &omega, &f, eps, 6)?;
        println!(
            "eps = {eps}: kept {}/{}, mu(A) = {:.4} (allowed {:.4}), defect <= {:.2e}",
            r.kept.len(),
            r.omega.len(),
            r.exceptional_measure(),
            eps * r.omega.measure(),
            r.defect_bound
        );
        let alphas: Vec<String> = r.constants.alphas.iter().map(|a| format!("{a:.3}")).collect();
        println!("  alphas [{}]", alphas.join(", "));
        for n in &r.norms {
            println!("  p = {}: ||Lip u||_p = {:.4}, ratio to formula {:.3}", n.p, n.lip_norm, n.ratio);
        }
    }
    Ok(())
}
