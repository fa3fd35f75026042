//! Drives the command-line pipeline in-process inside a scratch directory:
//! space, cubes, atlas, prescription, verification.

use cheeger_lusin::cli::run;

fn main() {
    let dir = std::env::temp_dir().join("cheeger-lusin-example");
    std::fs::create_dir_all(&dir).expect("scratch directory");
    let at = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (space, cubes, atlas, out) = (at("space.json"), at("cubes.json"), at("atlas.json"), at("run"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-space", "--kind", "grid1d", "--n", "257", "--out", &space],
        vec!["build-cubes", "--space", &space, "--dyadic", "--out", &cubes],
        vec!["load-atlas", "--space", &space, "--out", &atlas],
        vec![
            "prescribe", "--space", &space, "--cubes", &cubes, "--atlas", &atlas, "--target-kind", "sign", "--eps",
            "0.25", "--out", &out,
        ],
        vec!["verify", "--run", &out],
    ];
    for step in steps {
        let mut argv = vec!["cheeger-lusin".to_string()];
        argv.extend(step.iter().map(|s| s.to_string()));
        let code = run(&argv);
        println!("{} -> exit {code}", step[0]);
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("outputs in {}", dir.display());
}
