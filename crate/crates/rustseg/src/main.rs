fn main() {
    std::process::exit(rustseg::cli::dispatch(std::env::args_os()));
}
