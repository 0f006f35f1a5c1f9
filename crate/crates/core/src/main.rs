fn main() {
    std::process::exit(spgm::cli::run_cli(std::env::args_os()));
}
