fn main() {
    std::process::exit(relkd::cli::main());
}
