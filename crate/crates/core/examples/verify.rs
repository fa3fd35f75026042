//! Verifies a prescription, then runs an epsilon sweep and prints the
//! slope fits and the report in CSV form.

use std::collections::BTreeMap;

use cheeger_lusin::charts::ChartAtlas;
use cheeger_lusin::cubes::build_dyadic_tree;
use cheeger_lusin::prescribe::{prescribe, TargetField};
use cheeger_lusin::space::generate_space;
use cheeger_lusin::verify::{emit_report, sweep_epsilon, verify_alberti, Tolerance};
use cheeger_lusin::PointSet;

fn main() -> cheeger_lusin::Result<()> {
    let s = generate_space("grid1d", &BTreeMap::from([("n".to_string(), 513.0)]))?;
    let tree = build_dyadic_tree(&s)?;
    let atlas = ChartAtlas::split_line(&s, 0.5)?;
    let omega = PointSet::all(&s);
    let f = TargetField::from_fn(&s, &atlas, omega.clone(), |x, _| {
        vec![if s.coords(x)[0] > 0.5 { 1.0 } else { -1.0 }]
    })?;

    let r = prescribe(&s, &tree, &atlas, &omega, &f, 0.25, 6)?;
    let report = verify_alberti(&s, &tree, &atlas, &omega, &f, &r, &Tolerance::default())?;
    print!("{}", emit_report(&report, "csv")?);
    println!("all checks pass: {}", report.passed());

    let table = sweep_epsilon(&s, &tree, &atlas, &omega, &f, &[0.5, 0.25, 0.125, 0.0625], &[1.0, 2.0, f64::INFINITY])?;
    for fit in &table.fits {
        println!("p = {}: slope {:?}, expected {:.3}", fit.p, fit.slope, fit.expected);
    }
    println!("ratio spread {:.2}", table.ratio_spread);
    Ok(())
}
