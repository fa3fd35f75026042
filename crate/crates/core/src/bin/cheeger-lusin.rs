fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(cheeger_lusin::cli::run(&args));
}
