fn main() {
    std::process::exit(leafwood::cli::run_cli(std::env::args_os()));
}
