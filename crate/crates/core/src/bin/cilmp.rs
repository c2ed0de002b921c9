fn main() {
    std::process::exit(cilmp::harness::cli::run(std::env::args_os()));
}
