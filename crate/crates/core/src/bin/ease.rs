fn main() {
    std::process::exit(ease::cli::run(std::env::args_os()));
}
