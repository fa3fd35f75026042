//! Pointwise Lipschitz fields, their Lp norms, and the gluing bound.

use std::collections::BTreeMap;

use cheeger_lusin::lipfield::{glue_bound_check, global_lip, lip_field, lip_norm, ScalarField};
use cheeger_lusin::space::generate_space;
use cheeger_lusin::PointSet;

fn main() -> cheeger_lusin::Result<()> {
    let s = generate_space("grid2d", &BTreeMap::from([("n".to_string(), 16.0)]))?;
    let centre = s.len() / 2 + 8;
    let u = ScalarField::from_fn(&s, "cone", |x| (0.3 - s.dist(x, centre)).max(0.0));
    let lip = lip_field(&s, &u, 2.0 * s.resolution())?;
    for p in [1.0, 2.0, f64::INFINITY] {
        println!("||Lip u||_{p} = {:.4}", lip_norm(&s, &lip, p, None)?);
    }
    println!("global Lip = {:.4}", global_lip(&s, &u));

    // two disjoint regions, each carrying a 1-Lipschitz tent vanishing at its boundary
    let left = PointSet::new(&s, (0..s.len()).filter(|&x| s.coords(x)[0] < 0.4));
    let right = PointSet::new(&s, (0..s.len()).filter(|&x| s.coords(x)[0] > 0.6));
    let regions = vec![left, right];
    let v = ScalarField::from_fn(&s, "tents", |x| {
        regions
            .iter()
            .find(|r| r.contains(x))
            .map_or(0.0, |r| s.distance_to_set(x, &r.complement(&s)))
    });
    let glue = glue_bound_check(&s, &v, &regions, 1.0)?;
    println!(
        "gluing: global Lip {:.4} <= 2 C_q L = {:.4}: {}",
        glue.global_lip, glue.bound, glue.pass
    );
    Ok(())
}
