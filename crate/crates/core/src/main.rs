fn main() {
    std::process::exit(gibbsvb::cli::dispatch(std::env::args_os()));
}
