fn main() {
    std::process::exit(promkit::cli::run(std::env::args_os()));
}
