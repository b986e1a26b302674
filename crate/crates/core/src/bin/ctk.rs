fn main() {
    std::process::exit(crisis_kit::cli::run(std::env::args_os()));
}
