fn main() {
    std::process::exit(anmf_cli::run_cli(std::env::args_os()));
}
