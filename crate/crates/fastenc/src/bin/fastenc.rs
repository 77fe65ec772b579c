fn main() {
    std::process::exit(fastenc::cli::run(std::env::args_os()));
}
