fn main() {
    std::process::exit(kvec::cli::run(std::env::args()));
}
