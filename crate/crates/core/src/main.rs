fn main() {
    std::process::exit(hypergpa::cli::run(std::env::args_os()));
}
