fn main() {
    std::process::exit(metareg_cli::run_cli(std::env::args_os()));
}
