fn main() {
    std::process::exit(edgeprune::cli::run_cli(std::env::args_os()));
}
