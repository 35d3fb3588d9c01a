fn main() {
    std::process::exit(slide_cli::run_from(std::env::args_os()));
}
