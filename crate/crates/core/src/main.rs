fn main() {
    std::process::exit(intentc::cli::run(std::env::args_os()));
}
