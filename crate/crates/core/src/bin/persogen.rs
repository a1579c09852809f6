fn main() {
    std::process::exit(persogen::cli::run(std::env::args_os()));
}
