fn main() {
    std::process::exit(chronokit::cli::dispatch(std::env::args_os()));
}
