fn main() {
    std::process::exit(corrfuse::harness::cli::run(std::env::args_os()));
}
