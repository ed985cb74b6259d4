fn main() {
    std::process::exit(densereg::cli::main());
}
