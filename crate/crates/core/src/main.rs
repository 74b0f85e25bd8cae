fn main() {
    std::process::exit(stamp::cli::run(std::env::args_os()));
}
