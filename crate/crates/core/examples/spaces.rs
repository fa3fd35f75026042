//! Generates each built-in space and prints its measured constants.

use std::collections::BTreeMap;

use cheeger_lusin::space::{estimate_doubling, estimate_quasiconvexity, generate_space};

fn main() -> cheeger_lusin::Result<()> {
    let kinds: [(&str, &[(&str, f64)]); 4] = [
        ("grid1d", &[("n", 129.0)]),
        ("grid2d", &[("n", 12.0)]),
        ("weighted_grid1d", &[("n", 129.0), ("a", 1.0)]),
        ("heisenberg_lattice", &[("R", 3.0)]),
    ];
    for (kind, params) in kinds {
        let params: BTreeMap<String, f64> = params.iter().map(|&(k, v)| (k.into(), v)).collect();
        let s = generate_space(kind, &params)?;
        let doubling = estimate_doubling(&s);
        let cq = estimate_quasiconvexity(&s)?;
        println!(
            "{kind:>18}: {} points, h = {:.4}, diam = {:.3}, mu(X) = {:.3}, doubling {:.2}, C_q {:.3}",
            s.len(),
            s.resolution(),
            s.diameter(),
            s.total_measure(),
            doubling.constant,
            cq
        );
    }
    Ok(())
}
