fn main() {
    std::process::exit(streamsim::cli::main_with_args(std::env::args_os()));
}
