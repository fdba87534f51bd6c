fn main() {
    std::process::exit(semalign::cli::run(std::env::args_os()));
}
