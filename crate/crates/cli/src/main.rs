fn main() {
    std::process::exit(trimodal_cli::run_cli(std::env::args_os()).code());
}
