fn main() {
    std::process::exit(radial_canon::cli::run(std::env::args_os()));
}
