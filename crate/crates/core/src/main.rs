fn main() {
    std::process::exit(graphtune::cli::main());
}
