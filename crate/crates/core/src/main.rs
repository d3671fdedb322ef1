fn main() {
    std::process::exit(cts_core::harness::cli::run(std::env::args_os()));
}
