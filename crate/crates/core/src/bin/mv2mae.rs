fn main() {
    std::process::exit(mv2mae::cli::run_from_args(std::env::args_os()));
}
