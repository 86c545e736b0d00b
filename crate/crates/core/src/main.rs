fn main() {
    std::process::exit(minenetcd::cli::main_with_args(std::env::args_os()));
}
