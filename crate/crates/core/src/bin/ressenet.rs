fn main() {
    std::process::exit(ressenet::cli::main());
}
