fn main() {
    std::process::exit(polyembed::cli::run(std::env::args_os()));
}
