fn main() {
    std::process::exit(eomae::cli::run(std::env::args_os()));
}
