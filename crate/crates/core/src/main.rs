fn main() {
    std::process::exit(fusiongan::cli::run(std::env::args_os()));
}
