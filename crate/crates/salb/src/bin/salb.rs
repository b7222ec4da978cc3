fn main() {
    std::process::exit(salb::cli::run(std::env::args_os()));
}
