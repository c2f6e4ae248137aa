fn main() {
    std::process::exit(adanorm::cli::run_from_args(std::env::args_os()));
}
