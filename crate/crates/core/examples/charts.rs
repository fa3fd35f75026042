//! Windowed chart differentials of a piecewise-linear function under the
//! identity chart and a two-chart atlas.

use std::collections::BTreeMap;

use cheeger_lusin::charts::{differential, ChartAtlas};
use cheeger_lusin::lipfield::ScalarField;
use cheeger_lusin::space::generate_space;

fn main() -> cheeger_lusin::Result<()> {
    let s = generate_space("grid1d", &BTreeMap::from([("n".to_string(), 65.0)]))?;
    // kink at 1/2: slope 3 on the left, -1 on the right
    let u = ScalarField::from_fn(&s, "u", |x| {
        let t = s.coords(x)[0];
        if t < 0.5 { 3.0 * t } else { 1.5 - (t - 0.5) }
    });
    let rho = 2.0 * s.resolution();
    for (name, atlas) in [("identity", ChartAtlas::coordinates(&s)?), ("split", ChartAtlas::split_line(&s, 0.5)?)] {
        println!("{name} atlas, {} chart(s)", atlas.len());
        for x in [8, 31, 32, 33, 56] {
            let d = differential(&s, &atlas, &u, x, rho)?;
            println!(
                "  x = {:.4}: chart {}, g = {:+.4}, residual {:.2e}, window {}",
                s.coords(x)[0],
                d.chart,
                d.g[0],
                d.residual,
                d.window
            );
        }
    }
    Ok(())
}
