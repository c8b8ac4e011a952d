fn main() {
    std::process::exit(hadg::cli::run(std::env::args_os()));
}
