fn main() {
    std::process::exit(reguide::cli::run(std::env::args_os()));
}
