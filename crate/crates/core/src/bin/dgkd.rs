fn main() {
    std::process::exit(dgkd_core::harness::run_cli(std::env::args_os()));
}
