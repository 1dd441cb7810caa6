fn main() {
    std::process::exit(zerofield::cli::run(std::env::args_os()));
}
