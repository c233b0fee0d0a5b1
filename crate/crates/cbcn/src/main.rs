fn main() {
    std::process::exit(cbcn::cli::main());
}
