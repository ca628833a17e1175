fn main() {
    std::process::exit(sernas::cli::run_cli(std::env::args()));
}
