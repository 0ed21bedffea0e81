fn main() {
    let code = setseg::cli::run(std::env::args());
    std::process::exit(code);
}
