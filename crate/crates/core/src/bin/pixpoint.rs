fn main() {
    std::process::exit(pixpoint::cli::run(std::env::args_os()));
}
