fn main() {
    let code = lmmsdp::cli::main_with_args(std::env::args().collect());
    std::process::exit(code);
}
