fn main() {
    std::process::exit(lrmoe::cli::run(std::env::args()));
}
